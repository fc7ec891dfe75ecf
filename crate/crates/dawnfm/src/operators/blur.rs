//! Gaussian blur as circular convolution in the Fourier domain.

use crate::error::{DawnError, Result};
use crate::fft::{Fft2Plan, Spectrum};
use crate::tensor::Tensor;

use super::{check_shape, LinearOperator};

/// Point-spread kernel `K(x, y) ~ exp(-x^2/sx^2 - y^2/sy^2)` sampled on
/// the centered integer grid, stored in FFT layout (peak at index 0)
/// and normalized to sum exactly 1.
pub fn build_blur_kernel(side: usize, sigma_x: f64, sigma_y: f64) -> Result<Tensor> {
    if side == 0 {
        return Err(DawnError::InvalidParameter("kernel side must be >= 1".into()));
    }
    if sigma_x <= 0.0 || sigma_y <= 0.0 {
        return Err(DawnError::InvalidParameter(format!(
            "kernel widths must be positive, got ({sigma_x}, {sigma_y})"
        )));
    }
    let mut k = Tensor::zeros(&[side, side]);
    let s = side as isize;
    for i in 0..side {
        // Wrapped coordinate: 0, 1, ..., s/2, -(s/2 - 1), ..., -1.
        let yi = i as isize;
        let dy = if yi <= s / 2 { yi } else { yi - s } as f64;
        for j in 0..side {
            let xj = j as isize;
            let dx = if xj <= s / 2 { xj } else { xj - s } as f64;
            let v = (-(dx * dx) / (sigma_x * sigma_x) - (dy * dy) / (sigma_y * sigma_y)).exp();
            k.set2(i, j, v);
        }
    }
    let total = k.sum();
    Ok(k.scale(1.0 / total))
}

/// Circular Gaussian blur on square images. Symmetric, hence
/// self-adjoint: `adjoint` delegates to `apply`.
pub struct GaussianBlurOperator {
    side: usize,
    sigma_x: f64,
    sigma_y: f64,
    kernel: Tensor,
    kernel_hat: Spectrum,
    plan: Fft2Plan,
    shape: Vec<usize>,
}

impl GaussianBlurOperator {
    pub fn new(side: usize, sigma_x: f64, sigma_y: f64) -> Result<Self> {
        let kernel = build_blur_kernel(side, sigma_x, sigma_y)?;
        let plan = Fft2Plan::new(side, side);
        let kernel_hat = plan.forward(&kernel)?;
        Ok(Self {
            side,
            sigma_x,
            sigma_y,
            kernel,
            kernel_hat,
            plan,
            shape: vec![side, side],
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn sigmas(&self) -> (f64, f64) {
        (self.sigma_x, self.sigma_y)
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn kernel_spectrum(&self) -> &Spectrum {
        &self.kernel_hat
    }
}

/// Spectral route to the blur operator's top singular value: a
/// circular convolution is diagonal in the Fourier basis, so the top
/// singular value is the largest DFT magnitude of the kernel (1 at DC
/// for a normalized kernel).
pub fn fft_reference_top_singular(op: &GaussianBlurOperator) -> f64 {
    op.kernel_spectrum().max_abs()
}

impl LinearOperator for GaussianBlurOperator {
    fn domain_shape(&self) -> &[usize] {
        &self.shape
    }

    fn range_shape(&self) -> &[usize] {
        &self.shape
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(x.shape(), &self.shape, "blur apply")?;
        let spec = self.plan.forward(x)?.mul(&self.kernel_hat)?;
        let out = self.plan.inverse(&spec)?;
        // The product of two conjugate-symmetric spectra is conjugate
        // symmetric, so the imaginary part is pure rounding noise.
        out.to_real(1e-10 * (1.0 + x.max_abs()))
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.apply(y)
    }
}
