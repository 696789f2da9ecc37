//! The full classifier: GRU encoder plus classification head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::head::{loss_backward, loss_forward, BnMode, HeadGrads, HeadParams};
use crate::kafgate::{make_dictionary, GateVariant};
use crate::numerics::{Matrix, Rng};
use crate::optim::TensorSet;
use crate::recurrent::{unroll_backward_in, unroll_forward_in, unroll_inference, GruGrads, GruInit, GruParams, Workspace};
use crate::{Error, Result};

/// Architecture and initialisation settings of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub hidden_size: usize,
    pub classes: usize,
    pub variant: GateVariant,
    pub dict_size: usize,
    pub dict_lo: f64,
    pub dict_hi: f64,
    pub ridge_epsilon: f64,
    pub random_alpha_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            classes: self.classes,
            dict_size: self.dict_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_size: usize,
    pub hidden_size: usize,
    pub classes: usize,
    pub dict_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub gru: GruParams,
    pub head: HeadParams,
}

/// Gradients for every learnable parameter of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub gru: GruGrads,
    pub head: HeadGrads,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let dict = Arc::new(make_dictionary(config.dict_size, config.dict_lo, config.dict_hi)?);
        let opts = GruInit {
            input_size: config.input_size,
            hidden_size: config.hidden_size,
            variant: config.variant,
            ridge_epsilon: config.ridge_epsilon,
            random_alpha_scale: config.random_alpha_scale,
        };
        let gru = GruParams::init(opts, dict, rng)?;
        let head = HeadParams::init(config.hidden_size, config.classes, config.bn_momentum, config.bn_eps, rng)?;
        Ok(Self { config, gru, head })
    }

    pub fn shape(&self) -> ModelShape {
        self.config.shape()
    }

    pub fn variant(&self) -> GateVariant {
        self.gru.variant
    }

    /// Train-mode loss and its gradient on one batch. Updates the batch-norm
    /// running statistics.
    pub fn loss_and_gradients(&mut self, batch: &SequenceBatch) -> Result<(f64, GradientSet)> {
        self.loss_and_gradients_in(batch, &mut Workspace::default())
    }

    /// [`Model::loss_and_gradients`] reusing buffers from earlier calls.
    pub fn loss_and_gradients_in(&mut self, batch: &SequenceBatch, ws: &mut Workspace) -> Result<(f64, GradientSet)> {
        self.head.bn.mode = BnMode::Train;
        let h = unroll_forward_in(&self.gru, batch, ws)?;
        let (loss, _, head_cache) = loss_forward(&mut self.head, &h, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss is {loss}")));
        }
        let (d_h, head) = loss_backward(&self.head, head_cache);
        let gru = unroll_backward_in(&self.gru, ws, &d_h)?;
        Ok((loss, GradientSet { gru, head }))
    }

    /// Train-mode loss without gradients.
    pub fn loss(&mut self, batch: &SequenceBatch) -> Result<f64> {
        self.head.bn.mode = BnMode::Train;
        let h = unroll_inference(&self.gru, batch)?;
        Ok(loss_forward(&mut self.head, &h, &batch.labels)?.0)
    }

    /// Class probabilities under Eval-mode batch norm.
    pub fn predict(&self, batch: &SequenceBatch) -> Result<Matrix> {
        let h = unroll_inference(&self.gru, batch)?;
        self.head.predict(&h)
    }

    pub fn project_gammas(&mut self) {
        self.gru.update_gate.project_gammas();
        self.gru.reset_gate.project_gammas();
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub const TENSOR_NAMES: [&str; 17] = [
    "gru.w_u",
    "gru.w_r",
    "gru.w_h",
    "gru.v_u",
    "gru.v_r",
    "gru.v_h",
    "gru.b_u",
    "gru.b_r",
    "gru.b_h",
    "gru.update_gate.alphas",
    "gru.update_gate.gammas",
    "gru.reset_gate.alphas",
    "gru.reset_gate.gammas",
    "head.a",
    "head.b",
    "head.bn.scale",
    "head.bn.shift",
];

impl TensorSet for Model {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let g = &self.gru;
        let h = &self.head;
        let list: [&[f64]; 17] = [
            g.w_u.as_slice(),
            g.w_r.as_slice(),
            g.w_h.as_slice(),
            g.v_u.as_slice(),
            g.v_r.as_slice(),
            g.v_h.as_slice(),
            &g.b_u,
            &g.b_r,
            &g.b_h,
            g.update_gate.alphas.as_slice(),
            &g.update_gate.gammas,
            g.reset_gate.alphas.as_slice(),
            &g.reset_gate.gammas,
            h.a.as_slice(),
            &h.b,
            &h.bn.scale,
            &h.bn.shift,
        ];
        TENSOR_NAMES.into_iter().zip(list).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let g = &mut self.gru;
        let h = &mut self.head;
        let list: [&mut [f64]; 17] = [
            g.w_u.as_mut_slice(),
            g.w_r.as_mut_slice(),
            g.w_h.as_mut_slice(),
            g.v_u.as_mut_slice(),
            g.v_r.as_mut_slice(),
            g.v_h.as_mut_slice(),
            &mut g.b_u,
            &mut g.b_r,
            &mut g.b_h,
            g.update_gate.alphas.as_mut_slice(),
            &mut g.update_gate.gammas,
            g.reset_gate.alphas.as_mut_slice(),
            &mut g.reset_gate.gammas,
            h.a.as_mut_slice(),
            &mut h.b,
            &mut h.bn.scale,
            &mut h.bn.shift,
        ];
        TENSOR_NAMES.into_iter().zip(list).collect()
    }
}

impl TensorSet for GradientSet {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let g = &self.gru;
        let h = &self.head;
        let list: [&[f64]; 17] = [
            g.w_u.as_slice(),
            g.w_r.as_slice(),
            g.w_h.as_slice(),
            g.v_u.as_slice(),
            g.v_r.as_slice(),
            g.v_h.as_slice(),
            &g.b_u,
            &g.b_r,
            &g.b_h,
            g.update_alphas.as_slice(),
            &g.update_gammas,
            g.reset_alphas.as_slice(),
            &g.reset_gammas,
            h.a.as_slice(),
            &h.b,
            &h.scale,
            &h.shift,
        ];
        TENSOR_NAMES.into_iter().zip(list).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let g = &mut self.gru;
        let h = &mut self.head;
        let list: [&mut [f64]; 17] = [
            g.w_u.as_mut_slice(),
            g.w_r.as_mut_slice(),
            g.w_h.as_mut_slice(),
            g.v_u.as_mut_slice(),
            g.v_r.as_mut_slice(),
            g.v_h.as_mut_slice(),
            &mut g.b_u,
            &mut g.b_r,
            &mut g.b_h,
            g.update_alphas.as_mut_slice(),
            &mut g.update_gammas,
            g.reset_alphas.as_mut_slice(),
            &mut g.reset_gammas,
            h.a.as_mut_slice(),
            &mut h.b,
            &mut h.scale,
            &mut h.shift,
        ];
        TENSOR_NAMES.into_iter().zip(list).collect()
    }
}
