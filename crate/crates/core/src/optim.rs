//! Adam, global-norm gradient clipping and early-stopping bookkeeping.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A fixed, ordered list of named flat tensors.
///
/// Parameters and their gradients implement this with matching order and
/// lengths; the optimizer only ever walks the two lists in lockstep.
pub trait TensorSet {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;
}

/// A plain owned tensor list, handy for tests and tools.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatTensors(pub Vec<(&'static str, Vec<f64>)>);

impl TensorSet for FlatTensors {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        self.0.iter().map(|(n, t)| (*n, t.as_slice())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        self.0.iter_mut().map(|(n, t)| (*n, t.as_mut_slice())).collect()
    }
}

/// L2 norm over every entry of every tensor.
pub fn global_norm(set: &impl TensorSet) -> f64 {
    set.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients jointly so the global norm is at most `max_norm`.
/// Returns the factor applied (1 when nothing changed).
pub fn clip_global_norm(grads: &mut impl TensorSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Parameter(format!("clip norm must be positive, got {max_norm}")));
    }
    for (name, t) in grads.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
    }
    let norm = global_norm(grads);
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for (_, t) in grads.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &impl TensorSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut impl TensorSet, grads: &impl TensorSet) -> Result<()> {
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        if ps.len() != self.m.len() || gs.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                ps.len(),
                gs.len()
            )));
        }
        for (k, ((pn, p), (gn, g))) in ps.iter().zip(&gs).enumerate() {
            if p.len() != self.m[k].len() || g.len() != p.len() {
                return Err(Error::Usage(format!("tensor `{pn}`/`{gn}` does not match optimizer state")));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (_, p)) in ps.iter_mut().enumerate() {
            let g = gs[k].1;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping on validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_accuracy: f64,
    pub best_iteration: u64,
    pub patience_iterations: u64,
    pub eval_every: u64,
    /// Whether the last update set a new best.
    pub improved: bool,
}

impl EarlyStopState {
    pub fn new(patience_iterations: u64, eval_every: u64) -> Self {
        Self { best_accuracy: 0.0, best_iteration: 0, patience_iterations, eval_every, improved: false }
    }

    /// Records an evaluation. Only a strict increase counts as improvement.
    pub fn update(&mut self, iteration: u64, val_accuracy: f64) -> StopDecision {
        self.improved = val_accuracy > self.best_accuracy;
        if self.improved {
            self.best_accuracy = val_accuracy;
            self.best_iteration = iteration;
        }
        if iteration.saturating_sub(self.best_iteration) >= self.patience_iterations {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
