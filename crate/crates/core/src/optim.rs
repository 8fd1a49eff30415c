//! AdamW with decoupled weight decay, following the torch convention:
//! decay multiplies the parameter by `1 - lr * wd` *before* the Adam update,
//! the step counter is incremented before bias correction (so the first
//! update uses `t = 1`), and the update is
//! `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
//!
//! The optimizer is a plain recurrence over flat `f64` slices — no RNG, no
//! threading — so identical inputs reproduce identical trajectories bit for
//! bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW hyperparameters. `learning_rate` may be zero (the step is then an
/// exact no-op, decay included), which gives a cheap identity baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::param("learning_rate", "must be finite and >= 0"));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !beta.is_finite() || !(0.0..1.0).contains(&beta) {
                return Err(Error::param(name, "must lie in [0, 1)"));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::param("epsilon", "must be finite and > 0"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::param("weight_decay", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One optimizer instance over a fixed-size flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    params: AdamWParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(params: AdamWParams, len: usize) -> Result<Self> {
        params.validate()?;
        if len == 0 {
            return Err(Error::param("len", "optimizer needs at least one parameter"));
        }
        Ok(Self { params, m: vec![0.0; len], v: vec![0.0; len], step: 0 })
    }

    pub fn params(&self) -> &AdamWParams {
        &self.params
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Apply one update in place. `values` and `grads` must both match the
    /// length fixed at construction.
    pub fn step(&mut self, values: &mut [f64], grads: &[f64]) -> Result<()> {
        if values.len() != self.m.len() {
            return Err(Error::dim(self.m.len(), values.len(), "AdamW::step values"));
        }
        if grads.len() != self.m.len() {
            return Err(Error::dim(self.m.len(), grads.len(), "AdamW::step grads"));
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("AdamW::step grads".into()));
        }
        let p = &self.params;
        self.step += 1;
        let bias1 = 1.0 - p.beta1.powi(self.step as i32);
        let bias2 = 1.0 - p.beta2.powi(self.step as i32);
        for i in 0..values.len() {
            values[i] *= 1.0 - p.learning_rate * p.weight_decay;
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * grads[i];
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            values[i] -= p.learning_rate * m_hat / (v_hat.sqrt() + p.epsilon);
        }
        Ok(())
    }

    /// Row-matrix convenience over the same flat state: rows are laid out in
    /// order, so `step_matrix` on rows of widths `w0, w1, ...` is exactly
    /// `step` on their concatenation.
    pub fn step_matrix(&mut self, rows: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        let total: usize = rows.iter().map(Vec::len).sum();
        if total != self.m.len() {
            return Err(Error::dim(self.m.len(), total, "AdamW::step_matrix values"));
        }
        if rows.len() != grads.len()
            || rows.iter().zip(grads).any(|(r, g)| r.len() != g.len())
        {
            return Err(Error::dim(
                rows.len(),
                grads.len(),
                "AdamW::step_matrix gradient shape",
            ));
        }
        let mut flat_values: Vec<f64> = rows.iter().flatten().copied().collect();
        let flat_grads: Vec<f64> = grads.iter().flatten().copied().collect();
        self.step(&mut flat_values, &flat_grads)?;
        let mut offset = 0;
        for row in rows.iter_mut() {
            let len = row.len();
            row.copy_from_slice(&flat_values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}
