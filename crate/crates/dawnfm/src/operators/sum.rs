//! The duathlon toy operator: one scalar observation of two unknowns.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{check_shape, LinearOperator};

/// `A = [1, 1]`: apply sums the two components, adjoint replicates the
/// observation.
#[derive(Debug, Clone, Default)]
pub struct SumOperator;

const DOMAIN: [usize; 1] = [2];
const RANGE: [usize; 1] = [1];

impl SumOperator {
    pub fn new() -> Self {
        Self
    }
}

impl LinearOperator for SumOperator {
    fn domain_shape(&self) -> &[usize] {
        &DOMAIN
    }

    fn range_shape(&self) -> &[usize] {
        &RANGE
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(x.shape(), &DOMAIN, "sum apply")?;
        Ok(Tensor::scalar(x.data()[0] + x.data()[1]))
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        check_shape(y.shape(), &RANGE, "sum adjoint")?;
        Tensor::new(vec![2], vec![y.data()[0], y.data()[0]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{adjoint_dot_test, top_singular_value};
    use crate::rng::SeededRng;

    #[test]
    fn apply_and_adjoint_values() {
        let op = SumOperator::new();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(op.apply(&x).unwrap().data(), &[3.0]);
        let b = Tensor::scalar(5.0);
        assert_eq!(op.adjoint(&b).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn wrong_shapes_rejected() {
        let op = SumOperator::new();
        assert!(op.apply(&Tensor::zeros(&[3])).is_err());
        assert!(op.adjoint(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dot_test_machine_exact() {
        let op = SumOperator::new();
        let mut rng = SeededRng::new(41);
        let err = adjoint_dot_test(&op, &mut rng, 20).unwrap();
        assert!(err < 1e-14, "dot error {err}");
    }

    #[test]
    fn top_singular_value_is_sqrt_two() {
        let op = SumOperator::new();
        let mut rng = SeededRng::new(42);
        let s = top_singular_value(&op, 50, &mut rng).unwrap();
        assert!((s - 2.0f64.sqrt()).abs() < 1e-10, "sigma {s}");
    }
}
