//! Adam with bias correction, one moment pair per parameter tensor.

use crate::model::{Gradients, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ParameterSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub(crate) fn from_parts(
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        step: u64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        Self {
            m,
            v,
            step,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads.value_at(i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.value_at_mut(i).data_mut();
            for ((pj, mj), (vj, &gj)) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(g.data()))
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
