//! 2-D discrete Fourier transforms on real images.
//!
//! Convention: the forward transform is unscaled and the inverse is
//! scaled by `1/(H*W)`, so `inverse(forward(x)) == x` and the
//! convolution theorem holds without extra factors. Parseval's identity
//! under this convention reads `sum |x|^2 = sum |X|^2 / (H*W)`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Complex-valued H x W grid, row-major.
#[derive(Debug, Clone)]
pub struct Spectrum {
    h: usize,
    w: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn from_real(x: &Tensor) -> Result<Self> {
        if x.ndim() != 2 {
            return Err(shape_err(format!(
                "fft2 expects a 2-D tensor, got shape {:?}",
                x.shape()
            )));
        }
        Ok(Self {
            h: x.shape()[0],
            w: x.shape()[1],
            data: x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Elementwise product, the Fourier-domain face of convolution.
    pub fn mul(&self, other: &Spectrum) -> Result<Spectrum> {
        if self.h != other.h || self.w != other.w {
            return Err(shape_err(format!(
                "spectrum size mismatch: {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(Spectrum {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, c| m.max(c.norm()))
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, c| m.max(c.im.abs()))
    }

    pub fn sum_norm_sq(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Drops the imaginary part after checking it is numerically zero.
    pub fn to_real(&self, tol: f64) -> Result<Tensor> {
        let resid = self.max_abs_imag();
        if resid > tol {
            return Err(shape_err(format!(
                "imaginary residue {resid:.3e} exceeds {tol:.3e}; input was not conjugate-symmetric"
            )));
        }
        Tensor::new(vec![self.h, self.w], self.data.iter().map(|c| c.re).collect())
    }
}

/// Cached row/column FFT plans for one grid size.
pub struct Fft2Plan {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2Plan({}x{})", self.h, self.w)
    }
}

impl Fft2Plan {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft(w, FftDirection::Forward),
            row_inv: planner.plan_fft(w, FftDirection::Inverse),
            col_fwd: planner.plan_fft(h, FftDirection::Forward),
            col_inv: planner.plan_fft(h, FftDirection::Inverse),
        }
    }

    fn transform(&self, mut s: Spectrum, forward: bool) -> Spectrum {
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        for chunk in s.data.chunks_exact_mut(self.w) {
            row.process(chunk);
        }
        let mut column = vec![Complex64::default(); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                column[y] = s.data[y * self.w + x];
            }
            col.process(&mut column);
            for y in 0..self.h {
                s.data[y * self.w + x] = column[y];
            }
        }
        if !forward {
            let scale = 1.0 / (self.h * self.w) as f64;
            for c in &mut s.data {
                *c *= scale;
            }
        }
        s
    }

    pub fn forward(&self, x: &Tensor) -> Result<Spectrum> {
        let s = Spectrum::from_real(x)?;
        if s.h != self.h || s.w != self.w {
            return Err(shape_err(format!(
                "plan is {}x{}, input is {}x{}",
                self.h, self.w, s.h, s.w
            )));
        }
        Ok(self.transform(s, true))
    }

    pub fn inverse(&self, s: &Spectrum) -> Result<Spectrum> {
        if s.h != self.h || s.w != self.w {
            return Err(shape_err(format!(
                "plan is {}x{}, input is {}x{}",
                self.h, self.w, s.h, s.w
            )));
        }
        Ok(self.transform(s.clone(), false))
    }
}

/// One-shot forward 2-D DFT of a real image.
pub fn fft2_forward(x: &Tensor) -> Result<Spectrum> {
    let s = Spectrum::from_real(x)?;
    Ok(Fft2Plan::new(s.h, s.w).transform(s, true))
}

/// One-shot inverse 2-D DFT, scaled by `1/(H*W)`.
pub fn fft2_inverse(s: &Spectrum) -> Spectrum {
    Fft2Plan::new(s.h, s.w).transform(s.clone(), false)
}
