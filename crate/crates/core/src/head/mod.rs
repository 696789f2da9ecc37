//! Classification head: batch norm on the final GRU state, an affine layer
//! and softmax cross-entropy.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::numerics::{log_sum_exp, softmax_in_place, Matrix, Rng, Vector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub scale: Vector,
    pub shift: Vector,
    pub running_mean: Vector,
    pub running_var: Vector,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl BatchNormParams {
    pub fn new(features: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Parameter(format!("batch-norm momentum must be in (0, 1), got {momentum}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("batch-norm eps must be positive, got {eps}")));
        }
        Ok(Self {
            scale: Vector::filled(features, 1.0),
            shift: Vector::zeros(features),
            running_mean: Vector::zeros(features),
            running_var: Vector::filled(features, 1.0),
            momentum,
            eps,
            mode: BnMode::Train,
        })
    }

    pub fn features(&self) -> usize {
        self.scale.len()
    }

    /// Normalises with the running statistics; never mutates.
    pub fn apply_eval(&self, h: &Matrix) -> Matrix {
        let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        Matrix::from_fn(h.rows(), h.cols(), |r, c| {
            (h[(r, c)] - self.running_mean[c]) * inv[c] * self.scale[c] + self.shift[c]
        })
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    mode: BnMode,
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

/// Train mode normalises by batch statistics and updates the running mean
/// and (unbiased) variance; Eval mode uses the running statistics.
pub fn bn_forward(bn: &mut BatchNormParams, h: &Matrix) -> Result<(Matrix, BnCache)> {
    let (n, f) = h.shape();
    if f != bn.features() {
        return Err(Error::Shape(format!("batch norm over {} features got {f} columns", bn.features())));
    }
    match bn.mode {
        BnMode::Eval => {
            let inv_std: Vec<f64> = bn.running_var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            let x_hat = Matrix::from_fn(n, f, |r, c| (h[(r, c)] - bn.running_mean[c]) * inv_std[c]);
            let out = Matrix::from_fn(n, f, |r, c| x_hat[(r, c)] * bn.scale[c] + bn.shift[c]);
            Ok((out, BnCache { mode: BnMode::Eval, x_hat, inv_std }))
        }
        BnMode::Train => {
            if n < 2 {
                return Err(Error::Parameter(format!("train-mode batch norm needs batch >= 2, got {n}")));
            }
            let mut mean = vec![0.0; f];
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(h.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; f];
            for r in 0..n {
                for ((s, v), m) in var.iter_mut().zip(h.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            let x_hat = Matrix::from_fn(n, f, |r, c| (h[(r, c)] - mean[c]) * inv_std[c]);
            let out = Matrix::from_fn(n, f, |r, c| x_hat[(r, c)] * bn.scale[c] + bn.shift[c]);

            let m = bn.momentum;
            let unbias = n as f64 / (n - 1) as f64;
            for c in 0..f {
                bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * mean[c];
                bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * var[c] * unbias;
            }
            Ok((out, BnCache { mode: BnMode::Train, x_hat, inv_std }))
        }
    }
}

/// `(∂L/∂h, ∂L/∂scale, ∂L/∂shift)`.
pub fn bn_backward(bn: &BatchNormParams, cache: &BnCache, d_out: &Matrix) -> (Matrix, Vector, Vector) {
    let (n, f) = d_out.shape();
    let mut d_scale = Vector::zeros(f);
    let mut d_shift = Vector::zeros(f);
    for r in 0..n {
        for c in 0..f {
            d_scale[c] += d_out[(r, c)] * cache.x_hat[(r, c)];
            d_shift[c] += d_out[(r, c)];
        }
    }
    let d_h = match cache.mode {
        BnMode::Eval => Matrix::from_fn(n, f, |r, c| d_out[(r, c)] * bn.scale[c] * cache.inv_std[c]),
        BnMode::Train => {
            let nf = n as f64;
            Matrix::from_fn(n, f, |r, c| {
                let g = bn.scale[c];
                let dx_hat = d_out[(r, c)] * g;
                // Σ dx̂ = g·Σ dout and Σ dx̂·x̂ = g·Σ dout·x̂.
                cache.inv_std[c] / nf * (nf * dx_hat - g * d_shift[c] - cache.x_hat[(r, c)] * g * d_scale[c])
            })
        }
    };
    (d_h, d_scale, d_shift)
}

/// Batch norm followed by `softmax(A·h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `classes x hidden`.
    pub a: Matrix,
    pub b: Vector,
    pub bn: BatchNormParams,
}

impl HeadParams {
    pub fn init(hidden: usize, classes: usize, momentum: f64, eps: f64, rng: &mut Rng) -> Result<Self> {
        let limit = (6.0 / (hidden + classes) as f64).sqrt();
        Ok(Self {
            a: Matrix::from_fn(classes, hidden, |_, _| rng.uniform(-limit, limit)),
            b: Vector::zeros(classes),
            bn: BatchNormParams::new(hidden, momentum, eps)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.a.rows()
    }

    fn logits(&self, normed: &Matrix) -> Matrix {
        let mut z = Matrix::zeros(normed.rows(), self.classes());
        crate::numerics::gemm_into(normed, crate::numerics::Op::N, &self.a, crate::numerics::Op::T, 0.0, &mut z)
            .expect("head shapes checked by caller");
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(self.b.iter()) {
                *v += b;
            }
        }
        z
    }

    /// Class probabilities with Eval-mode batch norm.
    pub fn predict(&self, h: &Matrix) -> Result<Matrix> {
        self.check_input(h)?;
        let mut z = self.logits(&self.bn.apply_eval(h));
        for r in 0..z.rows() {
            softmax_in_place(z.row_mut(r));
        }
        Ok(z)
    }

    fn check_input(&self, h: &Matrix) -> Result<()> {
        if h.cols() != self.a.cols() {
            return Err(Error::Shape(format!("head expects {} features, got {}", self.a.cols(), h.cols())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    bn: BnCache,
    normed: Matrix,
    probs: Matrix,
    labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub a: Matrix,
    pub b: Vector,
    pub scale: Vector,
    pub shift: Vector,
}

impl HeadGrads {
    pub fn zeros_like(head: &HeadParams) -> Self {
        Self {
            a: Matrix::zeros(head.a.rows(), head.a.cols()),
            b: Vector::zeros(head.b.len()),
            scale: Vector::zeros(head.bn.features()),
            shift: Vector::zeros(head.bn.features()),
        }
    }
}

/// Mean cross-entropy of `softmax(A·bn(h) + b)` against `labels`, computed
/// in log space. Returns the loss, the predicted distributions and a cache.
pub fn loss_forward(head: &mut HeadParams, h: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, HeadCache)> {
    head.check_input(h)?;
    if labels.len() != h.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), h.rows())));
    }
    let classes = head.classes();
    if let Some(bad) = labels.iter().find(|l| **l >= classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
    }
    let (normed, bn_cache) = bn_forward(&mut head.bn, h)?;
    let mut probs = head.logits(&normed);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = probs.row_mut(r);
        total += log_sum_exp(row) - row[y];
        softmax_in_place(row);
    }
    let loss = total / labels.len() as f64;
    let cache = HeadCache { bn: bn_cache, normed, probs: probs.clone(), labels: labels.to_vec() };
    Ok((loss, probs, cache))
}

/// Gradient of the mean cross-entropy with respect to the head input (before
/// batch norm) and the head parameters.
pub fn loss_backward(head: &HeadParams, cache: HeadCache) -> (Matrix, HeadGrads) {
    let n = cache.labels.len();
    let d_logits = logit_gradient(&cache.probs, &cache.labels);
    let mut g = HeadGrads::zeros_like(head);
    crate::numerics::gemm_into(&d_logits, crate::numerics::Op::T, &cache.normed, crate::numerics::Op::N, 0.0, &mut g.a)
        .expect("head shapes fixed at forward");
    for r in 0..n {
        for (gb, d) in g.b.iter_mut().zip(d_logits.row(r)) {
            *gb += d;
        }
    }
    let d_normed = d_logits.matmul(&head.a).expect("head shapes fixed at forward");
    let (d_h, d_scale, d_shift) = bn_backward(&head.bn, &cache.bn, &d_normed);
    g.scale = d_scale;
    g.shift = d_shift;
    (d_h, g)
}

/// `(ŷ − onehot(y)) / N`.
pub fn logit_gradient(probs: &Matrix, labels: &[usize]) -> Matrix {
    let n = labels.len() as f64;
    let mut d = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        d[(r, y)] -= 1.0;
    }
    d.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    d
}
