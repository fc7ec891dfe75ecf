//! Reconstruction quality metrics: MSE, data misfit, windowed SSIM and
//! PSNR, computed identically for every experiment.

use log::warn;
use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::operators::LinearOperator;
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean squared difference over all elements.
pub fn mse(x_true: &Tensor, x_rec: &Tensor) -> Result<f64> {
    if x_true.shape() != x_rec.shape() {
        return Err(shape_err(format!(
            "mse shapes differ: {:?} vs {:?}",
            x_true.shape(),
            x_rec.shape()
        )));
    }
    let sum: f64 = x_true
        .data()
        .iter()
        .zip(x_rec.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x_true.len() as f64)
}

/// `-10 log10(mse)`; a perfect reconstruction maps to `+inf`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(x_true: &Tensor, x_rec: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x_true, x_rec)?))
}

/// Data misfit `(raw, normalized)`: raw is `0.5 * sum (A x_rec - b)^2`,
/// normalized divides by the number of data elements.
pub fn misfit_metric(op: &dyn LinearOperator, x_rec: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    let x_op = if x_rec.shape() == op.domain_shape() {
        x_rec.clone()
    } else {
        x_rec.reshape(op.domain_shape())?
    };
    let predicted = op.apply(&x_op)?;
    let residual = predicted.sub(b)?;
    let raw = 0.5 * residual.norm_sq();
    Ok((raw, raw / residual.len() as f64))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Valid-mode separable filtering with a symmetric 1-D window.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    // rows
    let mut rowpass = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &wi) in win.iter().enumerate() {
                acc += wi * img[y * w + x + i];
            }
            rowpass[y * ow + x] = acc;
        }
    }
    // columns
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &wi) in win.iter().enumerate() {
                acc += wi * rowpass[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_formula(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
        / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2))
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        warn!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window; using global statistics");
        let n = (h * w) as f64;
        let mu_a = a.iter().sum::<f64>() / n;
        let mu_b = b.iter().sum::<f64>() / n;
        let var_a = a.iter().map(|&v| (v - mu_a) * (v - mu_a)).sum::<f64>() / n;
        let var_b = b.iter().map(|&v| (v - mu_b) * (v - mu_b)).sum::<f64>() / n;
        let cov = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x - mu_a) * (y - mu_b))
            .sum::<f64>()
            / n;
        return ssim_formula(mu_a, mu_b, var_a, var_b, cov);
    }
    let win = gaussian_window();
    let sq_a: Vec<f64> = a.iter().map(|&v| v * v).collect();
    let sq_b: Vec<f64> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let e_a2 = filter_valid(&sq_a, h, w, &win);
    let e_b2 = filter_valid(&sq_b, h, w, &win);
    let e_ab = filter_valid(&ab, h, w, &win);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let var_a = e_a2[i] - mu_a[i] * mu_a[i];
        let var_b = e_b2[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        total += ssim_formula(mu_a[i], mu_b[i], var_a, var_b, cov);
    }
    total / mu_a.len() as f64
}

/// Windowed SSIM with an 11x11 Gaussian window (sigma 1.5) and the
/// standard constants for unit dynamic range; channels averaged.
pub fn ssim(x_true: &Tensor, x_rec: &Tensor) -> Result<f64> {
    if x_true.shape() != x_rec.shape() {
        return Err(shape_err(format!(
            "ssim shapes differ: {:?} vs {:?}",
            x_true.shape(),
            x_rec.shape()
        )));
    }
    let clamp_checked = |t: &Tensor, which: &str| {
        if t.min() < 0.0 || t.max() > 1.0 {
            warn!("{which} image has values outside [0, 1]; clamping for SSIM");
        }
        t.clamp(0.0, 1.0)
    };
    let a = clamp_checked(x_true, "reference");
    let b = clamp_checked(x_rec, "reconstructed");
    match a.shape() {
        [h, w] => Ok(ssim_plane(a.data(), b.data(), *h, *w)),
        [c, h, w] => {
            let plane = h * w;
            let mut total = 0.0;
            for ci in 0..*c {
                total += ssim_plane(
                    &a.data()[ci * plane..(ci + 1) * plane],
                    &b.data()[ci * plane..(ci + 1) * plane],
                    *h,
                    *w,
                );
            }
            Ok(total / *c as f64)
        }
        other => Err(shape_err(format!(
            "ssim needs (H,W) or (C,H,W), got {other:?}"
        ))),
    }
}

/// One evaluated image.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricRow {
    pub mse: f64,
    pub misfit: f64,
    pub misfit_normalized: f64,
    pub ssim: f64,
    pub psnr: f64,
}

pub fn metric_row(
    op: &dyn LinearOperator,
    x_true: &Tensor,
    x_rec: &Tensor,
    b: &Tensor,
) -> Result<MetricRow> {
    let m = mse(x_true, x_rec)?;
    let (raw, normalized) = misfit_metric(op, x_rec, b)?;
    Ok(MetricRow {
        mse: m,
        misfit: raw,
        misfit_normalized: normalized,
        ssim: ssim(x_true, x_rec)?,
        psnr: psnr_from_mse(m),
    })
}

/// Mean and population standard deviation per column over image rows.
pub fn aggregate_rows(rows: &[MetricRow]) -> (MetricRow, MetricRow) {
    let n = rows.len().max(1) as f64;
    let mean_of = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let std_of = |f: fn(&MetricRow) -> f64, mean: f64| {
        (rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    let mean = MetricRow {
        mse: mean_of(|r| r.mse),
        misfit: mean_of(|r| r.misfit),
        misfit_normalized: mean_of(|r| r.misfit_normalized),
        ssim: mean_of(|r| r.ssim),
        psnr: mean_of(|r| r.psnr),
    };
    let std = MetricRow {
        mse: std_of(|r| r.mse, mean.mse),
        misfit: std_of(|r| r.misfit, mean.misfit),
        misfit_normalized: std_of(|r| r.misfit_normalized, mean.misfit_normalized),
        ssim: std_of(|r| r.ssim, mean.ssim),
        psnr: std_of(|r| r.psnr, mean.psnr),
    };
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::SumOperator;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn mse_basics() {
        let z = Tensor::zeros(&[2, 2]);
        let o = Tensor::full(&[2, 2], 1.0);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        let half = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mse(&z, &half).unwrap(), 0.5);
        assert!(mse(&z, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn psnr_identities() {
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        assert_eq!(psnr_from_mse(0.0), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn psnr_matches_mse_identity(seed in 0u64..300) {
            let mut rng = SeededRng::new(seed);
            let a = rng.sample_standard_normal(&[6, 6]).unwrap();
            let b = rng.sample_standard_normal(&[6, 6]).unwrap();
            let m = mse(&a, &b).unwrap();
            let p = psnr(&a, &b).unwrap();
            prop_assert!((p + 10.0 * m.log10()).abs() < 1e-12);
        }
    }

    #[test]
    fn misfit_worked_examples() {
        struct Identity;
        impl LinearOperator for Identity {
            fn domain_shape(&self) -> &[usize] {
                &[2, 2]
            }
            fn range_shape(&self) -> &[usize] {
                &[2, 2]
            }
            fn apply(&self, x: &Tensor) -> Result<Tensor> {
                Ok(x.clone())
            }
            fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
                Ok(y.clone())
            }
        }
        let op = Identity;
        let x = Tensor::full(&[2, 2], 1.0);
        // b = A x: zero misfit.
        assert_eq!(misfit_metric(&op, &x, &x).unwrap(), (0.0, 0.0));
        // residual 1 everywhere on 2x2: raw = 2, normalized = 0.5.
        let b = Tensor::zeros(&[2, 2]);
        let (raw, norm) = misfit_metric(&op, &x, &b).unwrap();
        assert_eq!(raw, 2.0);
        assert_eq!(norm, 0.5);
    }

    #[test]
    fn misfit_is_permutation_invariant() {
        let op = SumOperator::new();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::scalar(2.5);
        let (raw, _) = misfit_metric(&op, &x, &b).unwrap();
        assert!((raw - 0.125).abs() < 1e-15);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = SeededRng::new(95);
        let x = rng.sample_standard_normal(&[20, 20]).unwrap().clamp(0.0, 1.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_reduce_to_luminance_term() {
        let a = Tensor::zeros(&[16, 16]);
        let b = Tensor::full(&[16, 16], 1.0);
        let expected = C1 / (1.0 + C1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = SeededRng::new(96);
        for _ in 0..5 {
            let a = rng.sample_standard_normal(&[16, 16]).unwrap().map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
            let b = rng.sample_standard_normal(&[16, 16]).unwrap().map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
            assert!(ab < 1.0, "distinct random images cannot be identical");
        }
    }

    /// Independent naive windowed SSIM: direct per-window loops over
    /// the same Gaussian weights.
    fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let win1d = gaussian_window();
        let k = win1d.len();
        let mut weights = vec![0.0; k * k];
        for y in 0..k {
            for x in 0..k {
                weights[y * k + x] = win1d[y] * win1d[x];
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=(h - k) {
            for ox in 0..=(w - k) {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let wgt = weights[y * k + x];
                        mu_a += wgt * a.at2(oy + y, ox + x);
                        mu_b += wgt * b.at2(oy + y, ox + x);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let wgt = weights[y * k + x];
                        let da = a.at2(oy + y, ox + x) - mu_a;
                        let db = b.at2(oy + y, ox + x) - mu_b;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                total += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (va + vb + C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_independent_reference() {
        let mut rng = SeededRng::new(97);
        for _ in 0..5 {
            let a = rng
                .sample_standard_normal(&[32, 32])
                .unwrap()
                .map(|v| (0.5 + 0.25 * v).clamp(0.0, 1.0));
            let b = rng
                .sample_standard_normal(&[32, 32])
                .unwrap()
                .map(|v| (0.5 + 0.25 * v).clamp(0.0, 1.0));
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_reference(&a, &b);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn tiny_images_fall_back_to_global_statistics() {
        let a = Tensor::zeros(&[4, 4]);
        let b = Tensor::full(&[4, 4], 1.0);
        let got = ssim(&a, &b).unwrap();
        assert!((got - C1 / (1.0 + C1)).abs() < 1e-12);
    }

    #[test]
    fn aggregation_matches_direct_recomputation() {
        let rows: Vec<MetricRow> = (0..5)
            .map(|i| MetricRow {
                mse: i as f64,
                misfit: 2.0 * i as f64,
                misfit_normalized: 0.5 * i as f64,
                ssim: 0.1 * i as f64,
                psnr: 10.0 - i as f64,
            })
            .collect();
        let (mean, std) = aggregate_rows(&rows);
        assert!((mean.mse - 2.0).abs() < 1e-12);
        let direct_std = (rows.iter().map(|r| (r.mse - 2.0).powi(2)).sum::<f64>() / 5.0).sqrt();
        assert!((std.mse - direct_std).abs() < 1e-12);
    }
}
