//! From-scratch Adam on flat parameter vectors, with the standard
//! bias-corrected update and fixed beta1 = 0.9, beta2 = 0.999,
//! eps = 1e-8 defaults.
//!
//! Adam minimizes; the training loop hands it gradients of the loss
//! (negative lower bound), and the sign flip happens there, in one place.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    alpha: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// Zeroed moments for `param_count` coordinates at step size `alpha`.
pub fn adam_init(param_count: usize, alpha: f64) -> Result<AdamState> {
    if param_count < 1 {
        return Err(Error::EmptyParameterVector);
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::InvalidStepSize(alpha));
    }
    Ok(AdamState {
        t: 0,
        m: vec![0.0; param_count],
        v: vec![0.0; param_count],
        alpha,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    })
}

impl AdamState {
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected update in place:
    /// `p -= alpha * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { coordinate: bad });
        }
        self.t += 1;
        let m_corr = 1.0 - self.beta1.powi(self.t as i32);
        let v_corr = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / m_corr;
            let v_hat = self.v[i] / v_corr;
            params[i] -= self.alpha * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
