//! End-to-end workflows behind the CLI subcommands. Everything here is
//! deterministic for a fixed config and seed: reruns produce
//! byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use dawnfm::data::{gen_phantoms, sample_duathlon_prior, DuathlonPrior};
use dawnfm::error::{DawnError, Result};
use dawnfm::flow::inject_noise_with_range;
use dawnfm::inference::{posterior_ensemble, InferenceConfig, PosteriorEnsemble};
use dawnfm::io::{deserialize_tensor, load_idx, serialize_tensor, write_image};
use dawnfm::metrics::{aggregate_rows, metric_row, MetricRow};
use dawnfm::model::ModelConfig;
use dawnfm::operators::{
    adjoint_dot_test, fft_reference_top_singular, top_singular_value, GaussianBlurOperator,
    LinearOperator, RadonOperator, SumOperator,
};
use dawnfm::rng::SeededRng;
use dawnfm::tensor::Tensor;
use dawnfm::train::{
    checkpoint, cosine_lr, train_epoch, LossBreakdown, NoiseRange, TrainConfig, TrainState,
};

use crate::config::{DatasetConfig, ExperimentConfig, OperatorConfig, Task};

/// Stream ids for observation synthesis at inference time.
const INFER_OBS_STREAM: u64 = 0x0B5E_0001;

fn cfg_err(msg: impl std::fmt::Display) -> DawnError {
    DawnError::Config(msg.to_string())
}

/// Materializes the train and test splits, entries shaped for the
/// model (`(N, C, H, W)` images or `(N, 2)` toy vectors).
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<(Tensor, Tensor)> {
    match &cfg.dataset {
        DatasetConfig::SyntheticPhantoms {
            side,
            train_count,
            test_count,
            max_ellipses,
            seed,
        } => {
            let mut rng = SeededRng::new(*seed);
            let all = gen_phantoms(&mut rng, train_count + test_count, *side, *max_ellipses)?;
            let reshaped = all.reshape(&[train_count + test_count, 1, *side, *side])?;
            let rows: Vec<Tensor> = (0..train_count + test_count)
                .map(|i| reshaped.batch_entry(i))
                .collect();
            Ok((
                Tensor::stack(&rows[..*train_count])?,
                Tensor::stack(&rows[*train_count..])?,
            ))
        }
        DatasetConfig::DuathlonPrior {
            prior,
            train_count,
            seed,
        } => {
            let mut rng = SeededRng::new(*seed);
            let train = sample_duathlon_prior(&mut rng, *train_count, prior)?;
            let test = sample_duathlon_prior(&mut rng, (*train_count / 8).max(1), prior)?;
            Ok((train, test))
        }
        DatasetConfig::Idx { images, limit } => {
            let all = load_idx(images)?;
            let (n, h, w) = match all.shape() {
                [n, h, w] => (*n, *h, *w),
                other => {
                    return Err(cfg_err(format!(
                        "idx dataset must hold images, got shape {other:?}"
                    )))
                }
            };
            let keep = limit.unwrap_or(n).min(n);
            let test_count = (keep / 6).max(1).min(keep.saturating_sub(1)).max(0);
            let reshaped = all.reshape(&[n, 1, h, w])?;
            let rows: Vec<Tensor> = (0..keep).map(|i| reshaped.batch_entry(i)).collect();
            let split = keep - test_count;
            if split == 0 {
                return Err(cfg_err("idx dataset too small to split"));
            }
            Ok((
                Tensor::stack(&rows[..split])?,
                Tensor::stack(&rows[split..])?,
            ))
        }
    }
}

/// Reference range of the clean observations over a dataset, the noise
/// scale for tasks whose single observation is a scalar.
pub fn dataset_observation_range(op: &dyn LinearOperator, dataset: &Tensor) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..dataset.batch_len() {
        let x = dataset.batch_entry(i);
        let x_op = if x.shape() == op.domain_shape() {
            x
        } else {
            x.reshape(op.domain_shape())?
        };
        let clean = op.apply(&x_op)?;
        lo = lo.min(clean.min());
        hi = hi.max(clean.max());
    }
    Ok(hi - lo)
}

pub struct TrainOutputs {
    pub final_checkpoint: PathBuf,
    pub mid_checkpoint: PathBuf,
    pub losses: Vec<(usize, f64, LossBreakdown)>,
}

fn format_loss_csv(rows: &[(usize, f64, LossBreakdown)]) -> String {
    let mut out = String::from("epoch,lr,total,velocity,misfit\n");
    for (epoch, lr, loss) in rows {
        out.push_str(&format!(
            "{epoch},{lr},{},{},{}\n",
            loss.total, loss.velocity_term, loss.misfit_term
        ));
    }
    out
}

/// Trains from scratch or resumes from a checkpoint directory; writes
/// a config echo, per-epoch loss CSV, a midpoint checkpoint and the
/// final checkpoint into `out`.
pub fn run_train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;

    let op = cfg.operator.build()?;
    let (train_set, _) = build_dataset(cfg)?;
    let mut train_cfg = cfg.train.clone();
    if matches!(cfg.task, Task::Duathlon)
        && matches!(train_cfg.noise_range, NoiseRange::PerSample)
    {
        // Scalar observations have no per-sample range; fall back to
        // the corpus-level range.
        let range = dataset_observation_range(op.as_ref(), &train_set)?;
        train_cfg.noise_range = NoiseRange::Fixed(range);
    }

    let mut state = match resume {
        Some(ckpt) => {
            let loaded = checkpoint::load(ckpt)?;
            if loaded.state.model.config() != &cfg.model {
                return Err(cfg_err("resume checkpoint was trained with a different model"));
            }
            info!("resuming from epoch {}", loaded.state.epoch);
            loaded.state
        }
        None => TrainState::new(cfg.model.clone(), &train_cfg)?,
    };

    let mid_epoch = train_cfg.max_epochs / 2;
    let mid_dir = out.join("ckpt-mid");
    let final_dir = out.join("ckpt-final");
    let mut losses = Vec::new();
    while state.epoch < train_cfg.max_epochs {
        let epoch = state.epoch;
        let lr = cosine_lr(&train_cfg, epoch);
        let loss = train_epoch(&mut state, &train_set, op.as_ref(), &train_cfg)?;
        losses.push((epoch, lr, loss));
        if (epoch + 1) % 20 == 0 || epoch + 1 == train_cfg.max_epochs {
            info!(
                "epoch {:>4}: total {:.6} velocity {:.6} misfit {:.6}",
                epoch, loss.total, loss.velocity_term, loss.misfit_term
            );
        }
        if epoch + 1 == mid_epoch {
            checkpoint::save(&mid_dir, &state, &train_cfg)?;
            fs::write(mid_dir.join("experiment.json"), cfg.to_json())?;
        }
    }
    checkpoint::save(&final_dir, &state, &train_cfg)?;
    fs::write(final_dir.join("experiment.json"), cfg.to_json())?;
    fs::write(out.join("losses.csv"), format_loss_csv(&losses))?;
    Ok(TrainOutputs {
        final_checkpoint: final_dir,
        mid_checkpoint: mid_dir,
        losses,
    })
}

/// Normalizes a panel for raster output: nonnegative data scaled by
/// its own maximum so sinograms and uncertainty maps stay visible.
fn normalized_panel(t: &Tensor) -> Tensor {
    let hi = t.max();
    if hi > 1.0 {
        t.scale(1.0 / hi)
    } else {
        t.clamp(0.0, 1.0)
    }
}

fn as_2d_for_panel(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [_, _] => Ok(t.clone()),
        [1, h, w] => t.reshape(&[*h, *w]),
        [2] | [1] => Err(cfg_err("toy tensors have no raster representation")),
        other => Err(cfg_err(format!("no panel layout for shape {other:?}"))),
    }
}

pub struct InferOutputs {
    pub per_image: Vec<PosteriorEnsemble>,
}

/// Loads ground-truth images, synthesizes noisy observations at
/// `noise_pct`, runs the posterior ensemble per image and writes
/// tensors plus raster panels.
pub fn run_infer(
    checkpoint_dir: &Path,
    input: &Path,
    noise_pct: f64,
    ensemble: usize,
    seed: u64,
    out: &Path,
) -> Result<InferOutputs> {
    let loaded = checkpoint::load(checkpoint_dir)?;
    let exp: ExperimentConfig = serde_json::from_str(
        &fs::read_to_string(checkpoint_dir.join("experiment.json"))
            .map_err(|e| cfg_err(format!("checkpoint lacks experiment.json: {e}")))?,
    )
    .map_err(|e| cfg_err(format!("experiment.json: {e}")))?;
    let op = exp.operator.build()?;
    fs::create_dir_all(out)?;

    let truths = load_truth_stack(input, op.as_ref())?;
    let range_ref = match loaded.train_cfg.noise_range {
        NoiseRange::Fixed(r) => Some(r),
        NoiseRange::PerSample => None,
    };

    let mut obs_rng = SeededRng::with_stream(seed, INFER_OBS_STREAM);
    let mut per_image = Vec::with_capacity(truths.len());
    for (i, x_true) in truths.iter().enumerate() {
        let clean = op.apply(x_true)?;
        let range = range_ref.unwrap_or(clean.max() - clean.min());
        let obs = inject_noise_with_range(op.as_ref(), x_true, noise_pct, range, &mut obs_rng)?;
        let icfg = InferenceConfig {
            n_steps: exp.inference.n_steps,
            ensemble_size: ensemble,
            seed: seed.wrapping_add(i as u64),
            noise_percent: noise_pct,
        };
        let posterior =
            posterior_ensemble(&loaded.state.model, &loaded.state.params, op.as_ref(), &obs.b, &icfg)?;

        let tag = format!("{i:04}");
        serialize_tensor(x_true, out.join(format!("truth_{tag}.dwnt")))?;
        serialize_tensor(&obs.b, out.join(format!("b_{tag}.dwnt")))?;
        serialize_tensor(&posterior.mean, out.join(format!("mean_{tag}.dwnt")))?;
        serialize_tensor(&posterior.std, out.join(format!("std_{tag}.dwnt")))?;
        if x_true.ndim() == 2 {
            let atb = op.adjoint(&obs.b)?;
            write_image(&normalized_panel(&obs.b), out.join(format!("input_{tag}.pgm")))?;
            write_image(&normalized_panel(&atb), out.join(format!("atb_{tag}.pgm")))?;
            write_image(
                &as_2d_for_panel(&posterior.mean)?.clamp(0.0, 1.0),
                out.join(format!("mean_{tag}.pgm")),
            )?;
            write_image(
                &normalized_panel(&as_2d_for_panel(&posterior.std)?),
                out.join(format!("std_{tag}.pgm")),
            )?;
            write_image(&x_true.clamp(0.0, 1.0), out.join(format!("truth_{tag}.pgm")))?;
        }
        per_image.push(posterior);
    }
    Ok(InferOutputs { per_image })
}

/// Reads the inference input: a DWNT tensor (single image or stack) or
/// an IDX file. Entries come back in the operator's domain shape.
fn load_truth_stack(input: &Path, op: &dyn LinearOperator) -> Result<Vec<Tensor>> {
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
    let raw = if ext == "idx" || ext == "gz" || ext == "ubyte" {
        load_idx(input)?
    } else {
        deserialize_tensor(input)?
    };
    let domain = op.domain_shape().to_vec();
    let stack: Vec<Tensor> = if raw.shape() == domain.as_slice() {
        vec![raw]
    } else if raw.shape().len() == domain.len() + 1 && raw.shape()[1..] == domain[..] {
        (0..raw.batch_len()).map(|i| raw.batch_entry(i)).collect()
    } else if raw.shape().len() == domain.len() {
        return Err(cfg_err(format!(
            "input shape {:?} does not match operator domain {domain:?}",
            raw.shape()
        )));
    } else {
        return Err(cfg_err(format!(
            "input shape {:?} is neither one image nor a stack of {domain:?}",
            raw.shape()
        )));
    };
    Ok(stack)
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

fn metric_csv_line(label: &str, row: &MetricRow) -> String {
    format!(
        "{label},{},{},{},{},{}\n",
        fmt_metric(row.mse),
        fmt_metric(row.misfit),
        fmt_metric(row.misfit_normalized),
        fmt_metric(row.ssim),
        fmt_metric(row.psnr)
    )
}

pub struct EvalOutputs {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    pub std: MetricRow,
}

/// Scores reconstructions against ground truth. Looks for
/// `mean_NNNN.dwnt` in `pred`, `truth_NNNN.dwnt` in `truth`, and uses
/// the recorded observation `b_NNNN.dwnt` when present (clean data
/// otherwise).
pub fn run_eval(
    pred: &Path,
    truth: &Path,
    operator_cfg: &Path,
    csv_path: &Path,
) -> Result<EvalOutputs> {
    let op = OperatorConfig::from_file(operator_cfg)?.build()?;
    let mut indices: Vec<String> = fs::read_dir(truth)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("truth_")
                .and_then(|s| s.strip_suffix(".dwnt"))
                .map(str::to_string)
        })
        .collect();
    indices.sort();
    if indices.is_empty() {
        return Err(cfg_err(format!(
            "no truth_*.dwnt files under {}",
            truth.display()
        )));
    }
    let mut rows = Vec::with_capacity(indices.len());
    let mut csv = String::from("image,mse,misfit,misfit_normalized,ssim,psnr\n");
    for tag in &indices {
        let x_true = deserialize_tensor(truth.join(format!("truth_{tag}.dwnt")))?;
        let x_rec_raw = deserialize_tensor(pred.join(format!("mean_{tag}.dwnt")))?;
        let x_rec = if x_rec_raw.shape() == x_true.shape() {
            x_rec_raw
        } else {
            x_rec_raw.reshape(x_true.shape())?
        };
        let b_path = pred.join(format!("b_{tag}.dwnt"));
        let b = if b_path.is_file() {
            deserialize_tensor(&b_path)?
        } else {
            let x_op = if x_true.shape() == op.domain_shape() {
                x_true.clone()
            } else {
                x_true.reshape(op.domain_shape())?
            };
            op.apply(&x_op)?
        };
        let row = metric_row(op.as_ref(), &x_true, &x_rec, &b)?;
        csv.push_str(&metric_csv_line(tag, &row));
        rows.push(row);
    }
    let (mean, std) = aggregate_rows(&rows);
    csv.push_str(&metric_csv_line("mean", &mean));
    csv.push_str(&metric_csv_line("std", &std));
    if let Some(parent) = csv_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(csv_path, csv)?;
    Ok(EvalOutputs { rows, mean, std })
}

pub struct ToyOutputs {
    pub state: TrainState,
    pub train_cfg: TrainConfig,
    pub data_range: f64,
    pub sigma: f64,
    pub posterior: PosteriorEnsemble,
    pub prior_samples: Tensor,
}

pub const TOY_SEED: u64 = 7;

/// Duathlon workflow: train the noise-informed toy model on the
/// two-Gaussian prior (just under 20k optimizer steps), then sample
/// the posterior for the observation `b` at `noise_pct`. Writes prior
/// and posterior sample CSVs when `out` is given.
pub fn run_toy(
    b_value: f64,
    noise_pct: f64,
    n_samples: usize,
    out: Option<&Path>,
) -> Result<ToyOutputs> {
    let prior = DuathlonPrior::default();
    let mut data_rng = SeededRng::with_stream(TOY_SEED, 0x70_0001);
    let corpus = sample_duathlon_prior(&mut data_rng, 4096, &prior)?;
    let op = SumOperator::new();
    let data_range = dataset_observation_range(&op, &corpus)?;

    let train_cfg = TrainConfig {
        alpha: 1.0,
        lr_init: 1e-3,
        lr_min: 1e-5,
        max_epochs: 600,
        batch_size: 128,
        p_low: 0.0,
        p_high: 20.0,
        seed: TOY_SEED,
        noise_range: NoiseRange::Fixed(data_range),
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(ModelConfig::mlp_toy(true), &train_cfg)?;
    while state.epoch < train_cfg.max_epochs {
        let loss = train_epoch(&mut state, &corpus, &op, &train_cfg)?;
        if (state.epoch % 100) == 0 {
            info!(
                "toy epoch {:>3}: total {:.5} velocity {:.5} misfit {:.5}",
                state.epoch, loss.total, loss.velocity_term, loss.misfit_term
            );
        }
    }

    let sigma = noise_pct / 100.0 * data_range;
    let icfg = InferenceConfig {
        n_steps: 100,
        ensemble_size: n_samples,
        seed: TOY_SEED,
        noise_percent: noise_pct,
    };
    let posterior = posterior_ensemble(
        &state.model,
        &state.params,
        &op,
        &Tensor::scalar(b_value),
        &icfg,
    )?;

    let mut prior_rng = SeededRng::with_stream(TOY_SEED, 0x70_0002);
    let prior_samples = sample_duathlon_prior(&mut prior_rng, n_samples, &prior)?;

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut prior_csv = String::from("x1,x2\n");
        for i in 0..prior_samples.batch_len() {
            prior_csv.push_str(&format!(
                "{},{}\n",
                prior_samples.at2(i, 0),
                prior_samples.at2(i, 1)
            ));
        }
        fs::write(dir.join("prior_samples.csv"), prior_csv)?;
        let mut post_csv = String::from("x1,x2\n");
        for s in &posterior.samples {
            post_csv.push_str(&format!("{},{}\n", s.data()[0], s.data()[1]));
        }
        fs::write(dir.join("posterior_samples.csv"), post_csv)?;
    }
    Ok(ToyOutputs {
        state,
        train_cfg,
        data_range,
        sigma,
        posterior,
        prior_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Blur,
    Radon,
    Sum,
}

pub struct OpTestReport {
    pub operator: String,
    pub dot_error: f64,
    pub linearity_error: f64,
    pub top_singular: f64,
    pub reference_singular: Option<f64>,
    pub passed: bool,
}

impl OpTestReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "operator {}\n  adjoint dot test (20 trials): {:.3e} (threshold 1e-9)\n  linearity error: {:.3e} (threshold 1e-10)\n  top singular value: {:.9}\n",
            self.operator, self.dot_error, self.linearity_error, self.top_singular
        );
        if let Some(r) = self.reference_singular {
            s.push_str(&format!("  independent spectral reference: {r:.9}\n"));
        }
        s.push_str(if self.passed { "PASS\n" } else { "FAIL\n" });
        s
    }
}

/// Operator diagnostics: dot test, linearity, and a power-iteration
/// spectral estimate checked against a closed form when one exists.
pub fn run_optest(kind: OpKind, side: usize) -> Result<OpTestReport> {
    let (op, name, reference): (Box<dyn LinearOperator>, String, Option<f64>) = match kind {
        OpKind::Blur => {
            let blur = GaussianBlurOperator::new(side, 3.0, 3.0)?;
            let reference = fft_reference_top_singular(&blur);
            (Box::new(blur), format!("blur (side {side})"), Some(reference))
        }
        OpKind::Radon => (
            Box::new(RadonOperator::with_default_angles(side)?),
            format!("radon (side {side}, 360 angles)"),
            None,
        ),
        OpKind::Sum => (
            Box::new(SumOperator::new()),
            "sum".to_string(),
            Some(std::f64::consts::SQRT_2),
        ),
    };

    let mut rng = SeededRng::new(2024);
    let dot_error = adjoint_dot_test(op.as_ref(), &mut rng, 20)?;

    let mut lin_rng = SeededRng::new(2025);
    let x = lin_rng.sample_standard_normal(op.domain_shape())?;
    let z = lin_rng.sample_standard_normal(op.domain_shape())?;
    let (a, bcoef) = (0.7, -1.3);
    let lhs = op.apply(&x.scale(a).add(&z.scale(bcoef))?)?;
    let rhs = op.apply(&x)?.scale(a).add(&op.apply(&z)?.scale(bcoef))?;
    let linearity_error = lhs.sub(&rhs)?.max_abs();

    let mut sv_rng = SeededRng::new(2026);
    let top_singular = top_singular_value(op.as_ref(), 200, &mut sv_rng)?;

    let mut passed = dot_error < 1e-9 && linearity_error < 1e-10;
    if let Some(r) = reference {
        passed &= (top_singular - r).abs() < 1e-6;
    }
    Ok(OpTestReport {
        operator: name,
        dot_error,
        linearity_error,
        top_singular,
        reference_singular: reference,
        passed,
    })
}
