//! Dense real N-dimensional arrays in row-major order.
//!
//! `Tensor` is the carrier for everything in the library: images,
//! sinograms, network parameters and whole batches. Values are `f64`;
//! shape metadata travels with the data so serialization and shape
//! checks are unambiguous.

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data, validating that
    /// the element count matches and every extent is at least 1.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err(format!("extents must be >= 1, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// All-zeros tensor. Extents must be positive; this is an internal
    /// constructor and panics on a degenerate shape.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "degenerate shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Single-element tensor of shape `(1,)`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at `(i, j)` of a 2-D tensor.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// Value at `(c, y, x)` of a 3-D tensor.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Tensor, ctx: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "{ctx}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.map(|v| a * v)
    }

    /// `self += a * x`, in place.
    pub fn add_scaled_mut(&mut self, a: f64, x: &Tensor) -> Result<()> {
        self.check_same_shape(x, "add_scaled_mut")?;
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Extent of the leading axis, treating the tensor as a batch.
    pub fn batch_len(&self) -> usize {
        self.shape[0]
    }

    /// Copies out entry `i` along the leading axis; the result drops
    /// that axis (a `(N,)` tensor yields a `(1,)` scalar tensor).
    pub fn batch_entry(&self, i: usize) -> Tensor {
        let n = self.shape[0];
        assert!(i < n, "batch index {i} out of range {n}");
        let inner: usize = self.shape[1..].iter().product::<usize>().max(1);
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks same-shaped tensors along a fresh leading axis.
    pub fn stack(rows: &[Tensor]) -> Result<Tensor> {
        let first = rows
            .first()
            .ok_or_else(|| shape_err("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(rows.len() * first.len());
        for r in rows {
            first.check_same_shape(r, "stack")?;
            data.extend_from_slice(&r.data);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_extents_and_count() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[11.0, 22.0]);
        assert_eq!(b.sub(&a).unwrap().data(), &[9.0, 18.0]);
        assert_eq!(a.scale(3.0).data(), &[3.0, 6.0]);
        assert_eq!(a.dot(&b).unwrap(), 50.0);
        let c = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn batch_entry_and_stack_round_trip() {
        let rows = vec![
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
        ];
        let batch = Tensor::stack(&rows).unwrap();
        assert_eq!(batch.shape(), &[2, 2, 2]);
        assert_eq!(batch.batch_entry(0), rows[0]);
        assert_eq!(batch.batch_entry(1), rows[1]);
    }

    #[test]
    fn scalar_batch_entry_keeps_rank_one() {
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b.batch_entry(2).shape(), &[1]);
        assert_eq!(b.batch_entry(2).data(), &[3.0]);
    }

    #[test]
    fn reductions() {
        let t = Tensor::new(vec![4], vec![-1.0, 3.0, 0.5, 1.5]).unwrap();
        assert_eq!(t.sum(), 4.0);
        assert_eq!(t.min(), -1.0);
        assert_eq!(t.max(), 3.0);
        assert_eq!(t.mean(), 1.0);
        assert_eq!(t.max_abs(), 3.0);
        assert!(t.all_finite());
    }
}
