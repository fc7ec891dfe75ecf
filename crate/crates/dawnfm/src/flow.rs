//! Stochastic-interpolation primitives.
//!
//! Linear trajectories `x_t = (1-t) x0 + t x1` with constant velocity
//! `v = x1 - x0`, plus the data-synthesis helpers used during training:
//! noise injection scaled to a percentage of the clean-data range and
//! antithetic batch construction.

use crate::error::{shape_err, DawnError, Result};
use crate::operators::LinearOperator;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// One point on a linear trajectory together with its endpoints and
/// constant velocity.
#[derive(Debug, Clone)]
pub struct InterpolantSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub v: Tensor,
}

/// Observation `b = A x1 + sigma z`, remembering both the absolute
/// noise level and the percentage it came from.
#[derive(Debug, Clone)]
pub struct NoisyObservation {
    pub b: Tensor,
    pub sigma: f64,
    pub p: f64,
}

/// Builds `x_t` and `v` for endpoints `x0`, `x1` at time `t`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<InterpolantSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DawnError::InvalidParameter(format!(
            "interpolation time must lie in [0, 1], got {t}"
        )));
    }
    if x0.shape() != x1.shape() {
        return Err(shape_err(format!(
            "endpoint shapes differ: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let x_t = x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)?;
    let v = x1.sub(x0)?;
    Ok(InterpolantSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t,
        x_t,
        v,
    })
}

/// Recovers the trajectory endpoint: `x1 = x_t + (1 - t) v_hat`.
pub fn recover_x1(x_t: &Tensor, v_hat: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DawnError::InvalidParameter(format!(
            "interpolation time must lie in [0, 1], got {t}"
        )));
    }
    x_t.zip_map(v_hat, |x, v| x + (1.0 - t) * v)
}

/// Synthesizes `b = A x1 + sigma z` with `sigma = (p/100) * range(A x1)`.
/// A degenerate range (constant clean data) yields `sigma = 0`.
pub fn inject_noise(
    op: &dyn LinearOperator,
    x1: &Tensor,
    p: f64,
    rng: &mut SeededRng,
) -> Result<NoisyObservation> {
    let clean = op.apply(x1)?;
    let range = clean.max() - clean.min();
    noisy_from_clean(clean, p, range, rng)
}

/// Same as [`inject_noise`] but with the data range supplied by the
/// caller. Needed when a single observation has no usable range of its
/// own, e.g. the scalar duathlon data, where the corpus-level range is
/// the meaningful scale.
pub fn inject_noise_with_range(
    op: &dyn LinearOperator,
    x1: &Tensor,
    p: f64,
    range: f64,
    rng: &mut SeededRng,
) -> Result<NoisyObservation> {
    let clean = op.apply(x1)?;
    noisy_from_clean(clean, p, range, rng)
}

fn noisy_from_clean(
    clean: Tensor,
    p: f64,
    range: f64,
    rng: &mut SeededRng,
) -> Result<NoisyObservation> {
    if !(0.0..=20.0).contains(&p) {
        return Err(DawnError::InvalidParameter(format!(
            "noise percentage must lie in [0, 20], got {p}"
        )));
    }
    if range < 0.0 || !range.is_finite() {
        return Err(DawnError::InvalidParameter(format!(
            "data range must be finite and nonnegative, got {range}"
        )));
    }
    let sigma = p / 100.0 * range;
    let b = if sigma == 0.0 {
        clean
    } else {
        let z = rng.sample_standard_normal(clean.shape())?;
        clean.zip_map(&z, |c, n| c + sigma * n)?
    };
    Ok(NoisyObservation { b, sigma, p })
}

/// Duplicates a batch of targets and pairs each fresh Gaussian start
/// with its negation: `x1 -> [x1; x1]`, `x0 = [z; -z]`.
pub fn antithetic_batch(x1_batch: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
    if x1_batch.ndim() < 2 {
        return Err(shape_err(format!(
            "antithetic batch expects a leading batch axis, got shape {:?}",
            x1_batch.shape()
        )));
    }
    let b = x1_batch.batch_len();
    if b == 0 {
        return Err(shape_err("empty batch"));
    }
    let z = rng.sample_standard_normal(x1_batch.shape())?;
    let mut x1_data = Vec::with_capacity(2 * x1_batch.len());
    x1_data.extend_from_slice(x1_batch.data());
    x1_data.extend_from_slice(x1_batch.data());
    let mut x0_data = Vec::with_capacity(2 * z.len());
    x0_data.extend_from_slice(z.data());
    x0_data.extend(z.data().iter().map(|v| -v));
    let mut shape = x1_batch.shape().to_vec();
    shape[0] = 2 * b;
    Ok((
        Tensor::new(shape.clone(), x1_data)?,
        Tensor::new(shape, x0_data)?,
    ))
}
