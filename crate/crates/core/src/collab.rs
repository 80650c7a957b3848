//! Risk-matrix dynamics and the server's historical gradients.
//!
//! Notation used in the docs below: `M_j` is client `j`'s alignment score,
//! `α` the risk matrix, `g` the historical average gradient and `ĝ_i` client
//! `i`'s historical risk gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::ParameterSet;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollabConfig {
    /// Step size of the risk-matrix update (λ).
    pub lambda_step: f64,
    /// Scale of the historical average gradient (δ).
    pub delta_scale: f64,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            lambda_step: 0.01,
            delta_scale: 0.1,
        }
    }
}

impl CollabConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_step >= 0.0 && self.lambda_step.is_finite()) {
            return Err(Error::config(format!("lambda_step must be >= 0, got {}", self.lambda_step)));
        }
        if !(self.delta_scale >= 0.0 && self.delta_scale.is_finite()) {
            return Err(Error::config(format!("delta_scale must be >= 0, got {}", self.delta_scale)));
        }
        Ok(())
    }
}

/// `n x n` matrix of nonnegative trust weights; row `i` belongs to client `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskMatrix<T> {
    alpha: Array2<T>,
}

impl<T: Scalar> RiskMatrix<T> {
    /// Every entry `1/n`, self weight included.
    pub fn uniform(n: usize) -> Self {
        let w = T::one() / T::of_usize(n.max(1));
        Self {
            alpha: Array2::from_elem((n, n), w),
        }
    }

    pub fn from_array(alpha: Array2<T>) -> Result<Self> {
        if !alpha.is_square() {
            return Err(Error::structural("risk matrix must be square"));
        }
        if alpha.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::structural("risk matrix entries must be finite and >= 0"));
        }
        Ok(Self { alpha })
    }

    pub fn n_clients(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.alpha.row(i).to_vec()
    }

    pub fn as_array(&self) -> &Array2<T> {
        &self.alpha
    }

    /// Replaces row `i` with its risk update.
    pub fn update_row(&mut self, i: usize, scores: &[T], consistency: T, lambda_step: T) -> Result<()> {
        let next = update_risk_row(&self.row(i), scores, consistency, lambda_step)?;
        self.alpha.row_mut(i).assign(&ndarray::Array1::from(next));
        Ok(())
    }
}

/// `M = L_CE - <grad, params>`: lower means the update points along the weights.
pub fn alignment_score<T: Scalar>(loss_ce: T, grad: &ParameterSet<T>, params: &ParameterSet<T>) -> Result<T> {
    let score = loss_ce - grad.dot(params)?;
    if !score.is_finite() {
        return Err(Error::non_finite("alignment score"));
    }
    Ok(score)
}

/// `out_j = max(row_j - λ (M_j + consistency), 0)`.
pub fn update_risk_row<T: Scalar>(row: &[T], scores: &[T], consistency: T, lambda_step: T) -> Result<Vec<T>> {
    if row.len() != scores.len() {
        return Err(Error::structural(format!(
            "risk row has {} entries but {} scores",
            row.len(),
            scores.len()
        )));
    }
    let out: Vec<T> = row
        .iter()
        .zip(scores)
        .map(|(&a, &m)| (a - lambda_step * (m + consistency)).max(T::zero()))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("risk row update"));
    }
    Ok(out)
}

/// Raw batch gradient plus the client's historical risk gradient.
pub fn correct_gradient<T: Scalar>(raw: &ParameterSet<T>, risk_grad: &ParameterSet<T>) -> Result<ParameterSet<T>> {
    raw.add(risk_grad)
}

/// `g = (δ / n) Σ_i grads_i`.
pub fn historical_average_gradient<T: Scalar>(grads: &[ParameterSet<T>], delta_scale: T) -> Result<ParameterSet<T>> {
    if grads.is_empty() {
        return Err(Error::structural("historical average of zero gradients"));
    }
    let w = delta_scale / T::of_usize(grads.len());
    let refs: Vec<&ParameterSet<T>> = grads.iter().collect();
    ParameterSet::weighted_sum(&refs, &vec![w; grads.len()])
}

/// `ĝ_i = Σ_j α_ij grads_j`, weighting every client's gradient by row `i`.
pub fn historical_risk_gradient<T: Scalar>(alpha_row: &[T], grads: &[ParameterSet<T>]) -> Result<ParameterSet<T>> {
    if alpha_row.len() != grads.len() {
        return Err(Error::structural(format!(
            "risk row has {} weights for {} gradients",
            alpha_row.len(),
            grads.len()
        )));
    }
    let refs: Vec<&ParameterSet<T>> = grads.iter().collect();
    ParameterSet::weighted_sum(&refs, alpha_row)
}
