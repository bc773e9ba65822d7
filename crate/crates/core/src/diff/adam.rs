//! First-order adaptive-moment optimizer.

use std::collections::BTreeMap;

use crate::diff::params::ParameterSet;
use crate::diff::tensor::Tensor;
use crate::Scalar;

/// Adam with bias correction. Defaults: lr 5e-4, decays 0.9/0.999, eps 1e-8.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Tensor<F>>,
    pub second_moment: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(learning_rate: F) -> Self {
        Adam {
            learning_rate,
            beta1: F::cast(0.9),
            beta2: F::cast(0.999),
            epsilon: F::cast(1e-8),
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without an entry in `grads` are treated
    /// as having zero gradient.
    pub fn step(&mut self, params: &mut ParameterSet<F>, grads: &BTreeMap<String, Tensor<F>>) {
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = F::one() - self.beta1.powi(t as i32);
        let bc2 = F::one() - self.beta2.powi(t as i32);
        let one = F::one();
        for (name, value) in params.iter_mut() {
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let zero_grad;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero_grad = Tensor::zeros(value.shape());
                    &zero_grad
                }
            };
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = value.data_mut();
            for ((p, mi), (vi, &gi)) in pd
                .iter_mut()
                .zip(md.iter_mut())
                .zip(vd.iter_mut().zip(g.data()))
            {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
