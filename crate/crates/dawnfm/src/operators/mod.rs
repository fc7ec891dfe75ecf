//! Linear forward maps and their adjoints.
//!
//! Every operator satisfies the dot-test contract
//! `<Ax, y> == <x, A^T y>`; the adjoint is what gets used both for the
//! data embedding `A^T b` and for the misfit gradient during training,
//! so transposition has to be exact, not approximate.

mod blur;
mod radon;
mod sum;

pub use blur::{build_blur_kernel, fft_reference_top_singular, GaussianBlurOperator};
pub use radon::RadonOperator;
pub use sum::SumOperator;

use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub trait LinearOperator: Send + Sync {
    fn domain_shape(&self) -> &[usize];
    fn range_shape(&self) -> &[usize];
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, y: &Tensor) -> Result<Tensor>;
}

pub(crate) fn check_shape(actual: &[usize], expected: &[usize], ctx: &str) -> Result<()> {
    if actual != expected {
        return Err(shape_err(format!("{ctx}: expected {expected:?}, got {actual:?}")));
    }
    Ok(())
}

/// Explicit matrix-backed operator, mostly a reference for diagnostics
/// and tests of the matrix-free operators.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
    domain: Vec<usize>,
    range: Vec<usize>,
}

impl DenseOperator {
    /// `matrix` is row-major `rows x cols`; domain/range are flat vectors.
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || matrix.len() != rows * cols {
            return Err(shape_err(format!(
                "dense operator {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                matrix.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            matrix,
            domain: vec![cols],
            range: vec![rows],
        })
    }

    pub fn diagonal(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = vec![0.0; n * n];
        for (i, &v) in entries.iter().enumerate() {
            m[i * n + i] = v;
        }
        Self::new(n, n, m).expect("square diagonal")
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn domain_shape(&self) -> &[usize] {
        &self.domain
    }

    fn range_shape(&self) -> &[usize] {
        &self.range
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.cols {
            return Err(shape_err(format!(
                "dense apply: expected {} values, got {}",
                self.cols,
                x.len()
            )));
        }
        let xv = x.data();
        let mut out = vec![0.0; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(xv).map(|(&m, &v)| m * v).sum();
        }
        Tensor::new(self.range.clone(), out)
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        if y.len() != self.rows {
            return Err(shape_err(format!(
                "dense adjoint: expected {} values, got {}",
                self.rows,
                y.len()
            )));
        }
        let yv = y.data();
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in yv.iter().enumerate() {
            let row = &self.matrix[i * self.cols..(i + 1) * self.cols];
            for (o, &m) in out.iter_mut().zip(row) {
                *o += m * yi;
            }
        }
        Tensor::new(self.domain.clone(), out)
    }
}

/// Max relative dot-test error `|<Ax,y> - <x,A^T y>| / (|<Ax,y>| + tiny)`
/// over random trials.
pub fn adjoint_dot_test(
    op: &dyn LinearOperator,
    rng: &mut SeededRng,
    trials: usize,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials.max(1) {
        let x = rng.sample_standard_normal(op.domain_shape())?;
        let y = rng.sample_standard_normal(op.range_shape())?;
        let lhs = op.apply(&x)?.dot(&y)?;
        let rhs = x.dot(&op.adjoint(&y)?)?;
        worst = worst.max((lhs - rhs).abs() / (lhs.abs() + 1e-30));
    }
    Ok(worst)
}

/// Power iteration on `A^T A`; returns the estimated top singular value.
pub fn top_singular_value(
    op: &dyn LinearOperator,
    iters: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut x = rng.sample_standard_normal(op.domain_shape())?;
    let norm = x.norm_sq().sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    x = x.scale(1.0 / norm);
    let mut rayleigh = 0.0;
    for _ in 0..iters.max(1) {
        let y = op.adjoint(&op.apply(&x)?)?;
        rayleigh = x.dot(&y)?;
        let ynorm = y.norm_sq().sqrt();
        if ynorm == 0.0 {
            return Ok(0.0);
        }
        x = y.scale(1.0 / ynorm);
    }
    Ok(rayleigh.max(0.0).sqrt())
}
