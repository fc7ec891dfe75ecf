//! Desk-scale datasets: random ellipse phantoms standing in for the
//! image corpora, and the two-Gaussian duathlon prior.

use serde::{Deserialize, Serialize};

use crate::error::{DawnError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Random phantom corpus: each image is a sum of 1..=`max_ellipses`
/// rotated ellipses with intensities in (0.2, 1.0), clamped to [0, 1]
/// and kept strictly inside the frame (the border rows and columns
/// stay zero).
pub fn gen_phantoms(
    rng: &mut SeededRng,
    count: usize,
    side: usize,
    max_ellipses: usize,
) -> Result<Tensor> {
    if side < 8 {
        return Err(DawnError::InvalidParameter(format!(
            "phantom side must be >= 8, got {side}"
        )));
    }
    if count == 0 || max_ellipses == 0 {
        return Err(DawnError::InvalidParameter(
            "count and max_ellipses must be >= 1".into(),
        ));
    }
    let s = side as f64;
    let mut out = Tensor::zeros(&[count, side, side]);
    let plane = side * side;
    for img in 0..count {
        let n_ell = 1 + rng.index(max_ellipses);
        let frame = &mut out.data_mut()[img * plane..(img + 1) * plane];
        for _ in 0..n_ell {
            let a = rng.uniform(s / 8.0, s / 4.0);
            let b = rng.uniform(s / 8.0, s / 4.0);
            let reach = a.max(b);
            // Keep the whole ellipse off the one-pixel border.
            let lo = 1.0 + reach;
            let hi = s - 2.0 - reach;
            let (cy, cx) = (rng.uniform(lo, hi), rng.uniform(lo, hi));
            let phi = rng.uniform(0.0, std::f64::consts::PI);
            let (sin_p, cos_p) = phi.sin_cos();
            let intensity = rng.uniform(0.2, 1.0);
            for y in 0..side {
                for x in 0..side {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let u = (dx * cos_p + dy * sin_p) / a;
                    let v = (-dx * sin_p + dy * cos_p) / b;
                    if u * u + v * v <= 1.0 {
                        frame[y * side + x] += intensity;
                    }
                }
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Two-Gaussian mixture prior over (bike, run) segment times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuathlonPrior {
    pub mean1: [f64; 2],
    pub mean2: [f64; 2],
    pub std: f64,
    pub weights: [f64; 2],
}

impl Default for DuathlonPrior {
    fn default() -> Self {
        Self {
            mean1: [1.0, 1.0],
            mean2: [3.0, 3.0],
            std: 0.25,
            weights: [0.5, 0.5],
        }
    }
}

impl DuathlonPrior {
    pub fn validate(&self) -> Result<()> {
        if self.std <= 0.0 {
            return Err(DawnError::InvalidParameter(format!(
                "prior std must be positive, got {}",
                self.std
            )));
        }
        if self.weights[0] <= 0.0
            || self.weights[1] <= 0.0
            || (self.weights[0] + self.weights[1] - 1.0).abs() > 1e-12
        {
            return Err(DawnError::InvalidParameter(format!(
                "weights must be positive and sum to 1, got {:?}",
                self.weights
            )));
        }
        Ok(())
    }

    /// Mixture density, used by rejection/importance oracles.
    pub fn density(&self, x: &[f64; 2]) -> f64 {
        let comp = |mean: &[f64; 2]| {
            let d2 = (x[0] - mean[0]).powi(2) + (x[1] - mean[1]).powi(2);
            (-d2 / (2.0 * self.std * self.std)).exp()
                / (2.0 * std::f64::consts::PI * self.std * self.std)
        };
        self.weights[0] * comp(&self.mean1) + self.weights[1] * comp(&self.mean2)
    }
}

/// Samples `(count, 2)` points from the mixture: component by weight,
/// then an isotropic Gaussian draw.
pub fn sample_duathlon_prior(
    rng: &mut SeededRng,
    count: usize,
    prior: &DuathlonPrior,
) -> Result<Tensor> {
    if count == 0 {
        return Err(DawnError::InvalidParameter("count must be >= 1".into()));
    }
    prior.validate()?;
    let mut out = Tensor::zeros(&[count, 2]);
    for i in 0..count {
        let mean = if rng.uniform_unit() < prior.weights[0] {
            &prior.mean1
        } else {
            &prior.mean2
        };
        out.data_mut()[2 * i] = mean[0] + prior.std * rng.normal();
        out.data_mut()[2 * i + 1] = mean[1] + prior.std * rng.normal();
    }
    Ok(out)
}
