//! Parallel-beam Radon transform with a matrix-free exact-transpose
//! adjoint.
//!
//! The image is zero-padded by `floor(s/2)` on all four sides, rays are
//! sampled every half pixel and read the padded grid through bilinear
//! interpolation. Forward and adjoint walk the identical (pixel,
//! weight) pairs, which makes the adjoint the exact transpose of the
//! discretized forward map.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{check_shape, LinearOperator};

const RAY_STEP: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct RadonOperator {
    side: usize,
    pad: usize,
    padded: usize,
    n_angles: usize,
    n_detectors: usize,
    angles_deg: Vec<f64>,
    domain: Vec<usize>,
    range: Vec<usize>,
}

impl RadonOperator {
    /// `n_angles` uniform view angles over [0, 180) degrees; detector
    /// count is `2s + 1` at one-pixel spacing.
    pub fn new(side: usize, n_angles: usize) -> Result<Self> {
        if side == 0 || n_angles == 0 {
            return Err(crate::error::DawnError::InvalidParameter(format!(
                "radon needs side >= 1 and n_angles >= 1, got ({side}, {n_angles})"
            )));
        }
        let pad = side / 2;
        let padded = side + 2 * pad;
        let n_detectors = 2 * side + 1;
        let angles_deg = (0..n_angles)
            .map(|k| 180.0 * k as f64 / n_angles as f64)
            .collect();
        Ok(Self {
            side,
            pad,
            padded,
            n_angles,
            n_detectors,
            angles_deg,
            domain: vec![side, side],
            range: vec![n_angles, n_detectors],
        })
    }

    pub fn with_default_angles(side: usize) -> Result<Self> {
        Self::new(side, 360)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    /// Visits every (padded pixel, weight) pair of the ray belonging to
    /// `(angle index, detector index)`. Both apply and adjoint run
    /// through here, which is what guarantees exact transposition.
    fn for_each_ray_weight(&self, angle: usize, det: usize, mut visit: impl FnMut(usize, f64)) {
        let n = self.padded;
        let center = (n as f64 - 1.0) / 2.0;
        let theta = self.angles_deg[angle].to_radians();
        let (dir_y, dir_x) = (theta.sin(), theta.cos());
        // Detector axis is perpendicular to the ray direction.
        let (nrm_y, nrm_x) = (dir_x, -dir_y);
        let offset = det as f64 - self.side as f64;
        let base_y = center + offset * nrm_y;
        let base_x = center + offset * nrm_x;
        let reach = n as f64 * std::f64::consts::SQRT_2 / 2.0;
        let steps = (2.0 * reach / RAY_STEP).ceil() as usize;
        for k in 0..=steps {
            let tau = -reach + k as f64 * RAY_STEP;
            let py = base_y + tau * dir_y;
            let px = base_x + tau * dir_x;
            let y0 = py.floor();
            let x0 = px.floor();
            let fy = py - y0;
            let fx = px - x0;
            let (iy, ix) = (y0 as isize, x0 as isize);
            let mut tap = |yy: isize, xx: isize, w: f64| {
                if w != 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                    visit(yy as usize * n + xx as usize, w * RAY_STEP);
                }
            };
            tap(iy, ix, (1.0 - fy) * (1.0 - fx));
            tap(iy, ix + 1, (1.0 - fy) * fx);
            tap(iy + 1, ix, fy * (1.0 - fx));
            tap(iy + 1, ix + 1, fy * fx);
        }
    }

    fn pad_image(&self, x: &Tensor) -> Vec<f64> {
        let mut padded = vec![0.0; self.padded * self.padded];
        for y in 0..self.side {
            let src = &x.data()[y * self.side..(y + 1) * self.side];
            let row = (y + self.pad) * self.padded + self.pad;
            padded[row..row + self.side].copy_from_slice(src);
        }
        padded
    }

    fn unpad_image(&self, padded: &[f64]) -> Tensor {
        let mut out = Tensor::zeros(&self.domain);
        for y in 0..self.side {
            let row = (y + self.pad) * self.padded + self.pad;
            out.data_mut()[y * self.side..(y + 1) * self.side]
                .copy_from_slice(&padded[row..row + self.side]);
        }
        out
    }
}

impl LinearOperator for RadonOperator {
    fn domain_shape(&self) -> &[usize] {
        &self.domain
    }

    fn range_shape(&self) -> &[usize] {
        &self.range
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(x.shape(), &self.domain, "radon apply")?;
        let padded = self.pad_image(x);
        let mut sino = Tensor::zeros(&self.range);
        let data = sino.data_mut();
        for a in 0..self.n_angles {
            for d in 0..self.n_detectors {
                let mut acc = 0.0;
                self.for_each_ray_weight(a, d, |pix, w| acc += padded[pix] * w);
                data[a * self.n_detectors + d] = acc;
            }
        }
        Ok(sino)
    }

    fn adjoint(&self, sino: &Tensor) -> Result<Tensor> {
        check_shape(sino.shape(), &self.range, "radon adjoint")?;
        let mut padded = vec![0.0; self.padded * self.padded];
        let data = sino.data();
        for a in 0..self.n_angles {
            for d in 0..self.n_detectors {
                let v = data[a * self.n_detectors + d];
                if v != 0.0 {
                    self.for_each_ray_weight(a, d, |pix, w| padded[pix] += v * w);
                }
            }
        }
        Ok(self.unpad_image(&padded))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::adjoint_dot_test;
    use crate::rng::SeededRng;

    /// Brute-force dense matrix of the forward map, built column by
    /// column from unit images.
    fn dense_forward_matrix(op: &RadonOperator) -> Vec<Vec<f64>> {
        let n = op.side() * op.side();
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let mut e = Tensor::zeros(&[op.side(), op.side()]);
            e.data_mut()[i] = 1.0;
            cols.push(op.apply(&e).unwrap().into_data());
        }
        cols
    }

    #[test]
    fn shapes_follow_the_contract() {
        let op = RadonOperator::new(8, 360).unwrap();
        assert_eq!(op.range_shape(), &[360, 17]);
        assert_eq!(op.domain_shape(), &[8, 8]);
        assert_eq!(op.angles_deg().len(), 360);
        assert!((op.angles_deg()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zeros_map_to_zeros_both_ways() {
        let op = RadonOperator::new(6, 30).unwrap();
        assert_eq!(op.apply(&Tensor::zeros(&[6, 6])).unwrap().max_abs(), 0.0);
        assert_eq!(op.adjoint(&Tensor::zeros(&[30, 13])).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn forward_matches_dense_matrix_oracle() {
        let op = RadonOperator::new(4, 12).unwrap();
        let cols = dense_forward_matrix(&op);
        let mut rng = SeededRng::new(31);
        let x = rng.sample_standard_normal(&[4, 4]).unwrap();
        let fast = op.apply(&x).unwrap();
        let m = op.n_angles() * op.n_detectors();
        let mut slow = vec![0.0; m];
        for (i, &xi) in x.data().iter().enumerate() {
            for (s, &c) in slow.iter_mut().zip(&cols[i]) {
                *s += xi * c;
            }
        }
        let worst = fast
            .data()
            .iter()
            .zip(&slow)
            .fold(0.0f64, |w, (&a, &b)| w.max((a - b).abs()));
        assert!(worst < 1e-9, "dense forward deviation {worst}");
    }

    #[test]
    fn adjoint_matches_dense_transpose_oracle() {
        let op = RadonOperator::new(4, 12).unwrap();
        let cols = dense_forward_matrix(&op);
        let mut rng = SeededRng::new(32);
        let y = rng.sample_standard_normal(&[12, 9]).unwrap();
        let fast = op.adjoint(&y).unwrap();
        let mut slow = vec![0.0; 16];
        for (i, s) in slow.iter_mut().enumerate() {
            *s = cols[i].iter().zip(y.data()).map(|(&c, &v)| c * v).sum();
        }
        let worst = fast
            .data()
            .iter()
            .zip(&slow)
            .fold(0.0f64, |w, (&a, &b)| w.max((a - b).abs()));
        assert!(worst < 1e-9, "dense adjoint deviation {worst}");
    }

    #[test]
    fn dot_test_small_and_medium() {
        for side in [5, 8, 16] {
            let op = RadonOperator::new(side, 40).unwrap();
            let mut rng = SeededRng::new(33);
            let err = adjoint_dot_test(&op, &mut rng, 20).unwrap();
            assert!(err < 1e-10, "side {side}: dot error {err}");
        }
    }

    #[test]
    fn disk_mass_is_angle_independent() {
        // Per-angle detector sums approximate the total image mass.
        let side = 16;
        let op = RadonOperator::new(side, 24).unwrap();
        let c = (side as f64 - 1.0) / 2.0;
        let disk = Tensor::from_fn(&[side, side], |i| {
            let (y, x) = ((i / side) as f64, (i % side) as f64);
            if (y - c).powi(2) + (x - c).powi(2) <= 25.0 {
                1.0
            } else {
                0.0
            }
        });
        let sino = op.apply(&disk).unwrap();
        let sums: Vec<f64> = (0..op.n_angles())
            .map(|a| {
                (0..op.n_detectors())
                    .map(|d| sino.at2(a, d))
                    .sum::<f64>()
            })
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        for (a, s) in sums.iter().enumerate() {
            let spread = (s - mean).abs() / mean;
            assert!(spread < 0.01, "angle {a}: relative spread {spread}");
        }
    }

    #[test]
    fn odd_side_padding() {
        // pad = floor(s/2); detectors still 2s + 1.
        let op = RadonOperator::new(5, 10).unwrap();
        assert_eq!(op.range_shape(), &[10, 11]);
        let mut rng = SeededRng::new(34);
        let err = adjoint_dot_test(&op, &mut rng, 10).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let op = RadonOperator::new(8, 10).unwrap();
        assert!(op.apply(&Tensor::zeros(&[7, 7])).is_err());
        assert!(op.adjoint(&Tensor::zeros(&[10, 10])).is_err());
    }
}
