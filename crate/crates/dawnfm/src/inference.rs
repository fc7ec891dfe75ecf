//! Posterior sampling: fixed-step RK4 integration of the learned
//! velocity field from t = 0 to t = 1, repeated from independent
//! Gaussian starts to form an ensemble with per-element mean and
//! standard deviation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DawnError, Result};
use crate::model::{ParameterSet, VelocityModel};
use crate::operators::LinearOperator;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Stream id for ensemble starting points.
const ENSEMBLE_STREAM: u64 = 0x1F42_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// RK4 step count; the step size is `1/n_steps`.
    pub n_steps: usize,
    /// Ensemble size M.
    pub ensemble_size: usize,
    pub seed: u64,
    /// Noise percentage of the observation, conditioning a
    /// noise-informed model as `p/100`.
    pub noise_percent: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            ensemble_size: 32,
            seed: 0,
            noise_percent: 5.0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.ensemble_size == 0 {
            return Err(DawnError::Config(
                "n_steps and ensemble_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Classical fourth-order Runge-Kutta with fixed step `1/n_steps` from
/// t = 0 to t = 1.
pub fn rk4_integrate<F>(mut field: F, x0: &Tensor, n_steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if n_steps == 0 {
        return Err(DawnError::InvalidParameter("n_steps must be >= 1".into()));
    }
    let h = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for step in 0..n_steps {
        let t = step as f64 * h;
        let k1 = field(&x, t)?;
        let mut mid = x.clone();
        mid.add_scaled_mut(0.5 * h, &k1)?;
        let k2 = field(&mid, t + 0.5 * h)?;
        let mut mid2 = x.clone();
        mid2.add_scaled_mut(0.5 * h, &k2)?;
        let k3 = field(&mid2, t + 0.5 * h)?;
        let mut end = x.clone();
        end.add_scaled_mut(h, &k3)?;
        let k4 = field(&end, t + h)?;
        x.add_scaled_mut(h / 6.0, &k1)?;
        x.add_scaled_mut(h / 3.0, &k2)?;
        x.add_scaled_mut(h / 3.0, &k3)?;
        x.add_scaled_mut(h / 6.0, &k4)?;
        if !x.all_finite() {
            return Err(DawnError::Inference(format!(
                "non-finite state after step {step} (t = {:.4})",
                t + h
            )));
        }
    }
    Ok(x)
}

/// Ensemble of reconstructions with elementwise statistics. `std` is
/// the biased (1/M) per-element standard deviation map;
/// `spread_scalar` is the scalar `1/M sum_j |x_j - mean|^2`.
#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    pub samples: Vec<Tensor>,
    pub mean: Tensor,
    pub std: Tensor,
    pub spread_scalar: f64,
}

/// Integrates every start through the same field; the runs are
/// independent and fan out across threads, results keep input order.
pub fn ensemble_integrate<F>(field: &F, starts: &[Tensor], n_steps: usize) -> Result<Vec<Tensor>>
where
    F: Fn(&Tensor, f64) -> Result<Tensor> + Sync,
{
    starts
        .par_iter()
        .map(|x0| rk4_integrate(|x, t| field(x, t), x0, n_steps))
        .collect()
}

/// Mean, per-element std and scalar spread of an ensemble.
pub fn ensemble_stats(samples: Vec<Tensor>) -> Result<PosteriorEnsemble> {
    let m = samples.len();
    if m == 0 {
        return Err(DawnError::Inference("empty ensemble".into()));
    }
    let shape = samples[0].shape().to_vec();
    let mut mean = Tensor::zeros(&shape);
    for s in &samples {
        mean.add_scaled_mut(1.0 / m as f64, s)?;
    }
    let mut var = Tensor::zeros(&shape);
    let mut spread = 0.0;
    for s in &samples {
        let d = s.sub(&mean)?;
        spread += d.norm_sq() / m as f64;
        for (v, &dv) in var.data_mut().iter_mut().zip(d.data()) {
            *v += dv * dv / m as f64;
        }
    }
    let std = var.map(f64::sqrt);
    Ok(PosteriorEnsemble {
        samples,
        mean,
        std,
        spread_scalar: spread,
    })
}

/// Draws M Gaussian starts and integrates the conditioned field
/// `s(x, E(A^T b), t, sigma)`. The data embedding of the fixed
/// observation is computed once and shared by all members.
pub fn posterior_ensemble(
    model: &VelocityModel,
    params: &ParameterSet,
    op: &dyn LinearOperator,
    b: &Tensor,
    cfg: &InferenceConfig,
) -> Result<PosteriorEnsemble> {
    cfg.validate()?;
    let model_shape = model.config().input_shape.clone();
    let atb_raw = op.adjoint(b)?;
    let atb = if atb_raw.shape() == model_shape.as_slice() {
        atb_raw
    } else {
        atb_raw.reshape(&model_shape)?
    };
    let data_emb = model.encode_data(params, &atb)?;
    let sigma = model
        .config()
        .noise_conditioning
        .then_some(cfg.noise_percent / 100.0);

    let mut rng = SeededRng::with_stream(cfg.seed, ENSEMBLE_STREAM);
    let starts: Vec<Tensor> = (0..cfg.ensemble_size)
        .map(|_| rng.sample_standard_normal(&model_shape))
        .collect::<Result<_>>()?;
    let field = |x: &Tensor, t: f64| model.forward(params, x, &data_emb, t, sigma);
    let samples = ensemble_integrate(&field, &starts, cfg.n_steps)?;
    ensemble_stats(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_integrated_exactly() {
        let v = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let x0 = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        let x1 = rk4_integrate(|_, _| Ok(v.clone()), &x0, 7).unwrap();
        let expected = x0.add(&v).unwrap();
        // Exact up to accumulated rounding (no truncation error).
        assert!(x1.sub(&expected).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn exponential_growth_reaches_e() {
        let x0 = Tensor::scalar(1.0);
        let x1 = rk4_integrate(|x, _| Ok(x.clone()), &x0, 100).unwrap();
        let err = (x1.data()[0] - std::f64::consts::E).abs();
        assert!(err < 1e-9, "e error {err}");
    }

    #[test]
    fn halving_h_shows_fourth_order() {
        let x0 = Tensor::scalar(1.0);
        let err = |n: usize| {
            let x1 = rk4_integrate(|x, _| Ok(x.clone()), &x0, n).unwrap();
            (x1.data()[0] - std::f64::consts::E).abs()
        };
        let ratio = err(50) / err(100);
        assert!(
            (14.0..=18.0).contains(&ratio),
            "convergence ratio {ratio} outside [14, 18]"
        );
    }

    #[test]
    fn linear_interpolant_field_recovers_x1() {
        // For the field v(x, t) = x1 - x0 the flow is linear and RK4
        // reproduces the endpoint exactly up to rounding.
        let mut rng = SeededRng::new(90);
        let x0 = rng.sample_standard_normal(&[5]).unwrap();
        let x1 = rng.sample_standard_normal(&[5]).unwrap();
        let v = x1.sub(&x0).unwrap();
        let reached = rk4_integrate(|_, _| Ok(v.clone()), &x0, 100).unwrap();
        assert!(reached.sub(&x1).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn nan_mid_integration_names_the_step() {
        let x0 = Tensor::scalar(1.0);
        let field = |x: &Tensor, t: f64| {
            if t > 0.5 {
                Ok(x.map(|_| f64::NAN))
            } else {
                Ok(x.clone())
            }
        };
        let err = rk4_integrate(field, &x0, 10).unwrap_err().to_string();
        assert!(err.contains("step"), "{err}");
    }

    #[test]
    fn zero_steps_is_invalid() {
        let x0 = Tensor::scalar(1.0);
        assert!(rk4_integrate(|x, _| Ok(x.clone()), &x0, 0).is_err());
    }

    #[test]
    fn stub_field_ensemble_statistics() {
        // Zero field: every sample equals its start.
        let mut rng = SeededRng::new(91);
        let starts: Vec<Tensor> = (0..5)
            .map(|_| rng.sample_standard_normal(&[4]).unwrap())
            .collect();
        let field = |_: &Tensor, _: f64| Ok(Tensor::zeros(&[4]));
        let samples = ensemble_integrate(&field, &starts, 20).unwrap();
        for (s, x0) in samples.iter().zip(&starts) {
            assert!(s.sub(x0).unwrap().max_abs() < 1e-15);
        }
        let stats = ensemble_stats(samples).unwrap();
        // Direct two-pass oracle for mean and std.
        let mut mean = Tensor::zeros(&[4]);
        for s in &starts {
            mean.add_scaled_mut(0.2, s).unwrap();
        }
        assert!(stats.mean.sub(&mean).unwrap().max_abs() < 1e-12);
        for j in 0..4 {
            let var: f64 = starts
                .iter()
                .map(|s| (s.data()[j] - mean.data()[j]).powi(2))
                .sum::<f64>()
                / 5.0;
            assert!((stats.std.data()[j] - var.sqrt()).abs() < 1e-12);
        }
        // Scalar spread consistency: sum of per-element variances.
        let total_var: f64 = stats.std.data().iter().map(|s| s * s).sum();
        assert!((stats.spread_scalar - total_var).abs() < 1e-12);
    }

    #[test]
    fn single_member_has_zero_std() {
        let stats = ensemble_stats(vec![Tensor::full(&[3], 1.5)]).unwrap();
        assert_eq!(stats.std.max_abs(), 0.0);
        assert_eq!(stats.mean, Tensor::full(&[3], 1.5));
    }

    #[test]
    fn statistics_are_order_invariant() {
        let mut rng = SeededRng::new(92);
        let samples: Vec<Tensor> = (0..8)
            .map(|_| rng.sample_standard_normal(&[6]).unwrap())
            .collect();
        let a = ensemble_stats(samples.clone()).unwrap();
        let mut reversed = samples;
        reversed.reverse();
        let b = ensemble_stats(reversed).unwrap();
        assert!(a.mean.sub(&b.mean).unwrap().max_abs() < 1e-12);
        assert!(a.std.sub(&b.std).unwrap().max_abs() < 1e-12);
    }
}
