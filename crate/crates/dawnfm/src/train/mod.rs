//! Misfit-augmented flow-matching training.
//!
//! The loss couples the velocity-matching term with a data-misfit term:
//! the recorded velocity estimate implies a predicted observation
//! `b_pred = A x_t + (1-t) A v_hat`, and `|b_pred - b|^2` pushes
//! recovered endpoints to honor the measurement. Gradients of the
//! misfit flow through `v_hat` only (`x_t` is constructed from the
//! sampled endpoints, not from parameters) and enter the network
//! through the adjoint: `(1-t) A^T (b_pred - b)`.
//!
//! Determinism contract: all random draws happen on the single training
//! stream in a fixed order, and gradient reduction runs over
//! fixed-size index chunks merged in order, so a run is bit-identical
//! for a given seed regardless of worker count.

mod adam;
pub mod checkpoint;

pub use adam::AdamState;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DawnError, Result};
use crate::flow::{antithetic_batch, inject_noise, inject_noise_with_range, interpolate};
use crate::model::{Gradients, ModelConfig, ParameterSet, VelocityModel};
use crate::operators::LinearOperator;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Stream id of the epoch loop, distinct from the per-parameter
/// initialization streams (which are keyed by name hashes).
const TRAIN_STREAM: u64 = 0xDA17_0001;

/// Samples per parallel gradient chunk; fixed so the reduction order
/// does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// How the noise scale relates to the data when synthesizing
/// observations during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRange {
    /// Sigma is `p/100` of each observation's own value range.
    PerSample,
    /// Sigma is `p/100` of a fixed reference range. Needed for scalar
    /// data, where a single observation has no range of its own.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Misfit weight.
    pub alpha: f64,
    pub lr_init: f64,
    pub lr_min: f64,
    /// Cosine-annealing horizon and stopping epoch.
    pub max_epochs: usize,
    /// Base batch size before antithetic doubling.
    pub batch_size: usize,
    /// Noise percentage is drawn uniformly from this range per sample.
    pub p_low: f64,
    pub p_high: f64,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_noise_range")]
    pub noise_range: NoiseRange,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn default_noise_range() -> NoiseRange {
    NoiseRange::PerSample
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr_init: 1e-4,
            lr_min: 1e-6,
            max_epochs: 200,
            batch_size: 64,
            p_low: 0.0,
            p_high: 20.0,
            seed: 0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            noise_range: default_noise_range(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(DawnError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=20.0).contains(&self.p_low)
            || !(0.0..=20.0).contains(&self.p_high)
            || self.p_low >= self.p_high
        {
            return Err(DawnError::Config(format!(
                "noise range must satisfy 0 <= p_low < p_high <= 20, got ({}, {})",
                self.p_low, self.p_high
            )));
        }
        if self.lr_min > self.lr_init {
            return Err(DawnError::Config(format!(
                "lr_min {} exceeds lr_init {}",
                self.lr_min, self.lr_init
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(DawnError::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at epoch `e`:
/// `lr_min + (lr_init - lr_min) (1 + cos(pi e / max_epochs)) / 2`,
/// held at `lr_min` past the annealing horizon.
pub fn cosine_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let frac = (epoch as f64 / cfg.max_epochs as f64).min(1.0);
    let phase = std::f64::consts::PI * frac;
    cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub velocity_term: f64,
    pub misfit_term: f64,
}

impl LossBreakdown {
    pub fn new(velocity_term: f64, misfit_term: f64, alpha: f64) -> Self {
        Self {
            total: velocity_term + alpha * misfit_term,
            velocity_term,
            misfit_term,
        }
    }
}

/// One training batch, per-sample; antithetic pairs occupy slots
/// `i` and `i + B` and share everything except the sign of `x0`.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x1: Vec<Tensor>,
    pub x0: Vec<Tensor>,
    pub t: Vec<f64>,
    /// Observations in the operator's range shape.
    pub b: Vec<Tensor>,
    /// Normalized noise level `p/100` fed to a noise-informed model.
    pub sigma_norm: Vec<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }
}

fn to_shape(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        Ok(t.clone())
    } else {
        t.reshape(shape)
    }
}

/// Pure loss terms for a velocity estimate supplied from outside; the
/// test seam that lets the estimator be stubbed.
pub fn loss_terms_for_sample(
    op: &dyn LinearOperator,
    v_hat: &Tensor,
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    b: &Tensor,
) -> Result<(f64, f64)> {
    let residual_v = v_hat.add(x0)?.sub(x1)?;
    let x_t = interpolate(x0, x1, t)?.x_t;
    let ax_t = op.apply(&to_shape(&x_t, op.domain_shape())?)?;
    let av = op.apply(&to_shape(v_hat, op.domain_shape())?)?;
    let b_pred = ax_t.add(&av.scale(1.0 - t))?;
    let residual_b = b_pred.sub(b)?;
    Ok((
        residual_v.norm_sq() / residual_v.len() as f64,
        residual_b.norm_sq() / residual_b.len() as f64,
    ))
}

/// Loss and parameter gradients over a batch. Terms are means over
/// samples and elements; `total = velocity + alpha * misfit`.
pub fn compute_loss(
    model: &VelocityModel,
    params: &ParameterSet,
    op: &dyn LinearOperator,
    batch: &TrainBatch,
    alpha: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let n = batch.len();
    if n == 0 {
        return Err(DawnError::Training("empty batch".into()));
    }
    let model_shape = model.config().input_shape.clone();
    let n_chunks = n.div_ceil(GRAD_CHUNK);

    let chunk_results: Vec<(f64, f64, Gradients)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| -> Result<(f64, f64, Gradients)> {
            let lo = ci * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(n);
            let mut v_sum = 0.0;
            let mut m_sum = 0.0;
            let mut grads = Gradients::zeros_like(params);
            for i in lo..hi {
                let (x0, x1, t, b) = (&batch.x0[i], &batch.x1[i], batch.t[i], &batch.b[i]);
                let sample = interpolate(x0, x1, t)?;
                let atb = to_shape(&op.adjoint(b)?, &model_shape)?;
                let sigma = model
                    .config()
                    .noise_conditioning
                    .then_some(batch.sigma_norm[i]);
                let rec = model.forward_recorded(params, &sample.x_t, &atb, t, sigma)?;
                let v_hat = rec.output();
                if !v_hat.all_finite() {
                    return Err(DawnError::Training(format!(
                        "non-finite velocity estimate at sample {i} (t = {t:.4})"
                    )));
                }

                let residual_v = v_hat.add(x0)?.sub(x1)?;
                let ax_t = op.apply(&to_shape(&sample.x_t, op.domain_shape())?)?;
                let av = op.apply(&to_shape(v_hat, op.domain_shape())?)?;
                let b_pred = ax_t.add(&av.scale(1.0 - t))?;
                let residual_b = b_pred.sub(b)?;
                let n_x = residual_v.len() as f64;
                let n_b = residual_b.len() as f64;
                v_sum += residual_v.norm_sq() / n_x;
                m_sum += residual_b.norm_sq() / n_b;

                // d total / d v_hat, batch-mean scaling folded in.
                let mut upstream = residual_v.scale(2.0 / (n_x * n as f64));
                let misfit_pull = to_shape(&op.adjoint(&residual_b)?, &model_shape)?;
                upstream.add_scaled_mut(
                    alpha * 2.0 * (1.0 - t) / (n_b * n as f64),
                    &misfit_pull,
                )?;
                grads.add_assign(&rec.backward(&upstream)?.grads);
            }
            Ok((v_sum, m_sum, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut v_total = 0.0;
    let mut m_total = 0.0;
    let mut grads = Gradients::zeros_like(params);
    for (v, m, g) in chunk_results {
        v_total += v;
        m_total += m;
        grads.add_assign(&g);
    }
    let loss = LossBreakdown::new(v_total / n as f64, m_total / n as f64, alpha);
    Ok((loss, grads))
}

/// Everything that evolves over a training run; checkpointable.
pub struct TrainState {
    pub model: VelocityModel,
    pub params: ParameterSet,
    pub adam: AdamState,
    pub epoch: usize,
    pub rng: SeededRng,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = VelocityModel::new(model_cfg)?;
        let params = model.init_params(cfg.seed);
        let adam = AdamState::new(&params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self {
            model,
            params,
            adam,
            epoch: 0,
            rng: SeededRng::with_stream(cfg.seed, TRAIN_STREAM),
        })
    }
}

/// Runs one epoch: shuffle, antithetic batch assembly, per-sample
/// `t`/`p` draws, noise injection, loss, Adam step at the cosine rate.
/// Returns sample-weighted mean losses over the epoch.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &Tensor,
    op: &dyn LinearOperator,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let n = dataset.batch_len();
    if n == 0 {
        return Err(DawnError::Training("empty dataset".into()));
    }
    let lr = cosine_lr(cfg, state.epoch);
    let mut order: Vec<usize> = (0..n).collect();
    state.rng.shuffle(&mut order);

    let mut v_sum = 0.0;
    let mut m_sum = 0.0;
    let mut samples = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let base: Vec<Tensor> = chunk.iter().map(|&i| dataset.batch_entry(i)).collect();
        let batch = assemble_batch(&base, op, cfg, &mut state.rng)?;
        let (loss, grads) = compute_loss(&state.model, &state.params, op, &batch, cfg.alpha)?;
        state.adam.step(&mut state.params, &grads, lr);
        let k = batch.len();
        v_sum += loss.velocity_term * k as f64;
        m_sum += loss.misfit_term * k as f64;
        samples += k;
    }
    state.epoch += 1;
    Ok(LossBreakdown::new(
        v_sum / samples as f64,
        m_sum / samples as f64,
        cfg.alpha,
    ))
}

/// Builds the doubled antithetic batch: pairs share their target,
/// observation, `t` and `p`; only the reference sample flips sign.
fn assemble_batch(
    base: &[Tensor],
    op: &dyn LinearOperator,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainBatch> {
    let stacked = Tensor::stack(base)?;
    let (x1_all, x0_all) = antithetic_batch(&stacked, rng)?;
    let b_count = base.len();

    let mut t = Vec::with_capacity(b_count);
    let mut sigma_norm = Vec::with_capacity(b_count);
    let mut b = Vec::with_capacity(b_count);
    for x1 in base {
        let ti = rng.uniform(0.0, 1.0);
        let pi = rng.uniform(cfg.p_low, cfg.p_high);
        let x1_op = to_shape(x1, op.domain_shape())?;
        let obs = match cfg.noise_range {
            NoiseRange::PerSample => inject_noise(op, &x1_op, pi, rng)?,
            NoiseRange::Fixed(range) => inject_noise_with_range(op, &x1_op, pi, range, rng)?,
        };
        t.push(ti);
        sigma_norm.push(pi / 100.0);
        b.push(obs.b);
    }

    let mut batch = TrainBatch {
        x1: Vec::with_capacity(2 * b_count),
        x0: Vec::with_capacity(2 * b_count),
        t: Vec::with_capacity(2 * b_count),
        b: Vec::with_capacity(2 * b_count),
        sigma_norm: Vec::with_capacity(2 * b_count),
    };
    for i in 0..2 * b_count {
        let pair = i % b_count;
        batch.x1.push(x1_all.batch_entry(i));
        batch.x0.push(x0_all.batch_entry(i));
        batch.t.push(t[pair]);
        batch.b.push(b[pair].clone());
        batch.sigma_norm.push(sigma_norm[pair]);
    }
    Ok(batch)
}
