//! AdaDelta.
//!
//! Per element, with `g` the gradient:
//!
//! ```text
//! E[g²]  ← ρ·E[g²] + (1 − ρ)·g²
//! Δ      ← −√((E[Δ²] + ε) / (E[g²] + ε)) · g
//! E[Δ²]  ← ρ·E[Δ²] + (1 − ρ)·Δ²
//! x      ← x + Δ
//! ```
//!
//! There is no learning rate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaDelta {
    rho: f64,
    epsilon: f64,
    acc_grad: Vec<Vec<f64>>,
    acc_delta: Vec<Vec<f64>>,
}

impl AdaDelta {
    /// Fresh state for parameters of the given lengths.
    pub fn new(lengths: &[usize], rho: f64, epsilon: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::config(format!("rho must lie in (0, 1), got {rho}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(AdaDelta {
            rho,
            epsilon,
            acc_grad: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            acc_delta: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        let lengths: Vec<usize> = params.iter().map(|t| t.len()).collect();
        Self::new(&lengths, DEFAULT_RHO, DEFAULT_EPSILON).expect("default hyper-parameters are valid")
    }

    /// Restores a saved state.
    pub fn from_parts(rho: f64, epsilon: f64, acc_grad: Vec<Vec<f64>>, acc_delta: Vec<Vec<f64>>) -> Result<Self> {
        let lengths: Vec<usize> = acc_grad.iter().map(Vec::len).collect();
        let mut state = Self::new(&lengths, rho, epsilon)?;
        if acc_delta.iter().map(Vec::len).ne(lengths.iter().copied()) {
            return Err(Error::dim("accumulator shapes differ"));
        }
        if acc_grad.iter().chain(&acc_delta).flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("accumulators must be non-negative"));
        }
        state.acc_grad = acc_grad;
        state.acc_delta = acc_delta;
        Ok(state)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Running average of squared gradients, per parameter.
    pub fn acc_grad(&self) -> &[Vec<f64>] {
        &self.acc_grad
    }

    /// Running average of squared updates, per parameter.
    pub fn acc_delta(&self) -> &[Vec<f64>] {
        &self.acc_delta
    }

    /// Applies one update. `grads[i]` must be present and match `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.acc_grad.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, got {}",
                self.acc_grad.len(),
                params.len()
            )));
        }
        for i in 0..params.len() {
            let g = grads.get(i).copied().flatten().ok_or(Error::MissingGrad(i))?;
            if g.len() != params[i].len() || g.len() != self.acc_grad[i].len() {
                return Err(Error::dim(format!(
                    "parameter {i}: gradient length {} does not match {}",
                    g.len(),
                    params[i].len()
                )));
            }
        }
        for (i, param) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above").data();
            self.update_slice(i, param.data_mut(), g);
        }
        Ok(())
    }

    fn update_slice(&mut self, index: usize, param: &mut [f64], grad: &[f64]) {
        let (rho, eps) = (self.rho, self.epsilon);
        let acc_g = &mut self.acc_grad[index];
        let acc_d = &mut self.acc_delta[index];
        for (((x, &g), eg), ed) in param.iter_mut().zip(grad).zip(acc_g.iter_mut()).zip(acc_d.iter_mut()) {
            *eg = rho * *eg + (1.0 - rho) * g * g;
            let delta = -((*ed + eps) / (*eg + eps)).sqrt() * g;
            *ed = rho * *ed + (1.0 - rho) * delta * delta;
            *x += delta;
        }
    }
}
