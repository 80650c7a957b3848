use ndarray::Zip;

use super::params::ParameterSet;
use crate::{Result, Scalar};

/// Adam moments plus hyper-parameters for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: ParameterSet<T>,
    pub second_moment: ParameterSet<T>,
    pub step: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> OptimizerState<T> {
    /// Fresh state with the usual betas (0.9, 0.999) and eps 1e-8.
    pub fn new(model: &ParameterSet<T>, learning_rate: T) -> Self {
        Self {
            first_moment: model.zeros_like(),
            second_moment: model.zeros_like(),
            step: 0,
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }

    /// One bias-corrected Adam update of `model`, in place.
    pub fn apply(&mut self, model: &mut ParameterSet<T>, grad: &ParameterSet<T>) -> Result<()> {
        model.check_compatible(grad)?;
        model.check_compatible(&self.first_moment)?;
        model.check_compatible(&self.second_moment)?;
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for l in 0..model.len() {
            let g = grad.tensor(l);
            let m = self.first_moment.tensor_mut(l);
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (T::one() - b1) * g);
            let v = self.second_moment.tensor_mut(l);
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
            let m = self.first_moment.tensor(l);
            let v = self.second_moment.tensor(l);
            Zip::from(model.tensor_mut(l)).and(m).and(v).for_each(|p, &m, &v| {
                let m_hat = m / c1;
                let v_hat = v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Value-style wrapper around [`OptimizerState::apply`].
pub fn adam_step<T: Scalar>(
    model: &ParameterSet<T>,
    grad: &ParameterSet<T>,
    state: &OptimizerState<T>,
) -> Result<(ParameterSet<T>, OptimizerState<T>)> {
    let mut model = model.clone();
    let mut state = state.clone();
    state.apply(&mut model, grad)?;
    Ok((model, state))
}
