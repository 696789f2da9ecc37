//! GRU cell with pluggable gates, sequence unrolling and full BPTT.
//!
//! ```text
//! u_t = g_u(W_u x_t + V_u h_{t-1} + b_u)
//! r_t = g_r(W_r x_t + V_r h_{t-1} + b_r)
//! c_t = tanh(W_h x_t + V_h (r_t ∘ h_{t-1}) + b_h)
//! h_t = (1 - u_t) ∘ h_{t-1} + u_t ∘ c_t
//! ```
//!
//! `g_u` and `g_r` are flexible gates from [`crate::kafgate`] with their own
//! coefficients. States are batch-major: every per-step quantity is a
//! `batch x hidden` block.

use std::sync::Arc;

use crate::data::SequenceBatch;
use crate::kafgate::{
    gate_backward_accumulate, gate_forward_into, identity_init, random_init, Dictionary, GateCache, GateInit,
    GateVariant, KafGateParams,
};
use crate::numerics::{gemm_raw, Matrix, Op, Rng, Vector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_u: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub v_u: Matrix,
    pub v_r: Matrix,
    pub v_h: Matrix,
    pub b_u: Vector,
    pub b_r: Vector,
    pub b_h: Vector,
    pub update_gate: KafGateParams,
    pub reset_gate: KafGateParams,
    pub variant: GateVariant,
}

/// Options for [`GruParams::init`].
#[derive(Debug, Clone, Copy)]
pub struct GruInit {
    pub input_size: usize,
    pub hidden_size: usize,
    pub variant: GateVariant,
    pub ridge_epsilon: f64,
    pub random_alpha_scale: f64,
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-limit, limit))
}

impl GruParams {
    /// Glorot-uniform weights, zero biases, gates initialised per the
    /// variant.
    pub fn init(opts: GruInit, dictionary: Arc<Dictionary>, rng: &mut Rng) -> Result<Self> {
        let (i, h) = (opts.input_size, opts.hidden_size);
        if i == 0 || h == 0 {
            return Err(Error::Parameter("input and hidden sizes must be positive".into()));
        }
        let w_u = glorot(h, i, rng);
        let w_r = glorot(h, i, rng);
        let w_h = glorot(h, i, rng);
        let v_u = glorot(h, h, rng);
        let v_r = glorot(h, h, rng);
        let v_h = glorot(h, h, rng);
        let (update_gate, reset_gate) = match opts.variant.init {
            GateInit::Identity => (
                identity_init(dictionary.clone(), h, opts.ridge_epsilon)?,
                identity_init(dictionary, h, opts.ridge_epsilon)?,
            ),
            GateInit::Random => {
                let mut gate_rng = rng.split(0x6a7e);
                (
                    random_init(dictionary.clone(), h, &mut gate_rng, opts.random_alpha_scale)?,
                    random_init(dictionary, h, &mut gate_rng, opts.random_alpha_scale)?,
                )
            }
        };
        Ok(Self {
            input_size: i,
            hidden_size: h,
            w_u,
            w_r,
            w_h,
            v_u,
            v_r,
            v_h,
            b_u: Vector::zeros(h),
            b_r: Vector::zeros(h),
            b_h: Vector::zeros(h),
            update_gate,
            reset_gate,
            variant: opts.variant,
        })
    }

    fn check(&self) -> Result<()> {
        let (i, h) = (self.input_size, self.hidden_size);
        let ok = [&self.w_u, &self.w_r, &self.w_h].iter().all(|m| m.shape() == (h, i))
            && [&self.v_u, &self.v_r, &self.v_h].iter().all(|m| m.shape() == (h, h))
            && [&self.b_u, &self.b_r, &self.b_h].iter().all(|b| b.len() == h)
            && self.update_gate.units() == h
            && self.reset_gate.units() == h;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("GRU parameter shapes are inconsistent".into()))
        }
    }
}

/// Per-step quantities kept for the backward pass.
#[derive(Debug, Clone)]
struct StepRecord {
    u: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    rh: Vec<f64>,
    u_cache: GateCache,
    r_cache: GateCache,
}

impl StepRecord {
    fn resize(&mut self, n: usize) {
        for v in [&mut self.u, &mut self.r, &mut self.c, &mut self.rh] {
            v.resize(n, 0.0);
        }
    }

    fn new(n: usize) -> Self {
        Self {
            u: vec![0.0; n],
            r: vec![0.0; n],
            c: vec![0.0; n],
            rh: vec![0.0; n],
            u_cache: GateCache::empty(),
            r_cache: GateCache::empty(),
        }
    }
}

/// Cache of a single [`cell_step`].
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Matrix,
    h_prev: Matrix,
    record: StepRecord,
}

impl StepCache {
    pub fn update_gate(&self) -> &[f64] {
        &self.record.u
    }

    pub fn reset_gate(&self) -> &[f64] {
        &self.record.r
    }

    pub fn candidate(&self) -> &[f64] {
        &self.record.c
    }
}

/// One recurrent step given the input projections `x·W_*ᵀ` for the step.
///
/// `keep_gate_caches` controls whether the gate kernels are stored for a
/// backward pass.
#[allow(clippy::too_many_arguments)]
fn step_core(
    p: &GruParams,
    xu: &[f64],
    xr: &[f64],
    xh: &[f64],
    h_prev: &[f64],
    batch: usize,
    h_out: &mut [f64],
    rec: &mut StepRecord,
    pre: &mut Vec<f64>,
    keep_gate_caches: bool,
) {
    let h = p.hidden_size;
    let n = batch * h;
    pre.resize(n, 0.0);
    let kind = p.variant.kind;

    // (x·W_uᵀ + h·V_uᵀ) + b_u
    pre.copy_from_slice(xu);
    gemm_raw(1.0, h_prev, (batch, h), Op::N, p.v_u.as_slice(), (h, h), Op::T, 1.0, pre, h);
    add_bias(pre, &p.b_u);
    gate_forward_into(&p.update_gate, kind, pre, h, &mut rec.u, keep_gate_caches.then_some(&mut rec.u_cache));

    pre.copy_from_slice(xr);
    gemm_raw(1.0, h_prev, (batch, h), Op::N, p.v_r.as_slice(), (h, h), Op::T, 1.0, pre, h);
    add_bias(pre, &p.b_r);
    gate_forward_into(&p.reset_gate, kind, pre, h, &mut rec.r, keep_gate_caches.then_some(&mut rec.r_cache));

    for ((rh, r), hp) in rec.rh.iter_mut().zip(&rec.r).zip(h_prev) {
        *rh = r * hp;
    }
    pre.copy_from_slice(xh);
    gemm_raw(1.0, &rec.rh, (batch, h), Op::N, p.v_h.as_slice(), (h, h), Op::T, 1.0, pre, h);
    add_bias(pre, &p.b_h);
    for (c, s) in rec.c.iter_mut().zip(pre.iter()) {
        *c = s.tanh();
    }
    for i in 0..n {
        let u = rec.u[i];
        h_out[i] = (1.0 - u) * h_prev[i] + u * rec.c[i];
    }
}

fn add_bias(rows: &mut [f64], bias: &[f64]) {
    for row in rows.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Input projections for every row of `x` (`n x input`), one buffer per
/// weight matrix.
fn project_inputs(p: &GruParams, x: &[f64], n: usize) -> [Vec<f64>; 3] {
    let mut out = Default::default();
    project_inputs_into(p, x, n, &mut out);
    out
}

fn project_inputs_into(p: &GruParams, x: &[f64], n: usize, out: &mut [Vec<f64>; 3]) {
    let (i, h) = (p.input_size, p.hidden_size);
    for (w, buf) in [&p.w_u, &p.w_r, &p.w_h].into_iter().zip(out.iter_mut()) {
        buf.resize(n * h, 0.0);
        gemm_raw(1.0, x, (n, i), Op::N, w.as_slice(), (h, i), Op::T, 0.0, buf, h);
    }
}

/// A single GRU step on a `batch x input` block.
pub fn cell_step(p: &GruParams, x_t: &Matrix, h_prev: &Matrix) -> Result<(Matrix, StepCache)> {
    p.check()?;
    let batch = x_t.rows();
    if x_t.cols() != p.input_size || h_prev.shape() != (batch, p.hidden_size) {
        return Err(Error::Shape(format!(
            "step input {}x{} / state {}x{} do not fit input {} hidden {}",
            x_t.rows(),
            x_t.cols(),
            h_prev.rows(),
            h_prev.cols(),
            p.input_size,
            p.hidden_size
        )));
    }
    let [xu, xr, xh] = project_inputs(p, x_t.as_slice(), batch);
    let mut h_t = Matrix::zeros(batch, p.hidden_size);
    let mut rec = StepRecord::new(batch * p.hidden_size);
    let mut pre = Vec::new();
    step_core(p, &xu, &xr, &xh, h_prev.as_slice(), batch, h_t.as_mut_slice(), &mut rec, &mut pre, true);
    Ok((h_t, StepCache { x: x_t.clone(), h_prev: h_prev.clone(), record: rec }))
}

/// Everything [`unroll_backward`] needs; consumed by it.
#[derive(Debug)]
pub struct UnrollCache {
    steps: usize,
    batch: usize,
    input_size: usize,
    hidden_size: usize,
    /// `steps·batch x input`, time-major.
    inputs: Vec<f64>,
    /// `h_0 .. h_T`, each `batch x hidden`.
    states: Vec<f64>,
    records: Vec<StepRecord>,
}

impl UnrollCache {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// State after step `t` (`t = 0` is the zero initial state).
    pub fn state(&self, t: usize) -> &[f64] {
        let n = self.batch * self.hidden_size;
        &self.states[t * n..(t + 1) * n]
    }

    pub fn update_gate(&self, t: usize) -> &[f64] {
        &self.records[t].u
    }

    pub fn reset_gate(&self, t: usize) -> &[f64] {
        &self.records[t].r
    }

    pub fn candidate(&self, t: usize) -> &[f64] {
        &self.records[t].c
    }
}

fn check_sequence(p: &GruParams, seq: &SequenceBatch) -> Result<()> {
    p.check()?;
    if seq.steps == 0 || seq.batch == 0 {
        return Err(Error::Parameter("sequence batch is empty".into()));
    }
    if seq.features != p.input_size {
        return Err(Error::Shape(format!(
            "sequence has {} features, network expects {}",
            seq.features, p.input_size
        )));
    }
    Ok(())
}

/// Runs the GRU from `h_0 = 0` over the whole sequence, keeping what BPTT
/// needs. Returns the final state (`batch x hidden`).
pub fn unroll_forward(p: &GruParams, seq: &SequenceBatch) -> Result<(Matrix, UnrollCache)> {
    let mut ws = Workspace::default();
    let h = unroll_forward_in(p, seq, &mut ws)?;
    Ok((h, ws.cache.take().expect("forward pass fills the cache")))
}

/// Buffers that survive from one training iteration to the next, so a
/// steady-state iteration allocates little.
#[derive(Debug, Default)]
pub struct Workspace {
    cache: Option<UnrollCache>,
    projections: [Vec<f64>; 3],
    pre_grads: [Vec<f64>; 3],
}

/// [`unroll_forward`] that keeps its cache in `ws` for [`unroll_backward_in`].
pub fn unroll_forward_in(p: &GruParams, seq: &SequenceBatch, ws: &mut Workspace) -> Result<Matrix> {
    check_sequence(p, seq)?;
    let (t_len, b, h) = (seq.steps, seq.batch, p.hidden_size);
    let n = b * h;
    project_inputs_into(p, &seq.inputs, t_len * b, &mut ws.projections);
    let [xu, xr, xh] = &ws.projections;
    let cache = ws.cache.get_or_insert_with(|| UnrollCache {
        steps: 0,
        batch: 0,
        input_size: 0,
        hidden_size: 0,
        inputs: Vec::new(),
        states: Vec::new(),
        records: Vec::new(),
    });
    cache.steps = t_len;
    cache.batch = b;
    cache.input_size = p.input_size;
    cache.hidden_size = h;
    cache.inputs.clear();
    cache.inputs.extend_from_slice(&seq.inputs);
    cache.states.resize((t_len + 1) * n, 0.0);
    cache.states[..n].fill(0.0);
    cache.records.truncate(t_len);
    for rec in &mut cache.records {
        rec.resize(n);
    }
    cache.records.resize_with(t_len, || StepRecord::new(n));
    let mut pre = Vec::new();
    for (t, rec) in cache.records.iter_mut().enumerate() {
        let (done, rest) = cache.states.split_at_mut((t + 1) * n);
        let h_prev = &done[t * n..];
        let span = t * n..(t + 1) * n;
        step_core(p, &xu[span.clone()], &xr[span.clone()], &xh[span], h_prev, b, &mut rest[..n], rec, &mut pre, true);
    }
    Matrix::from_vec(b, h, cache.states[t_len * n..].to_vec())
        .map_err(|e| Error::Numerical(format!("hidden state diverged: {e}")))
}

/// Forward pass only, without storing anything for BPTT.
pub fn unroll_inference(p: &GruParams, seq: &SequenceBatch) -> Result<Matrix> {
    check_sequence(p, seq)?;
    let (t_len, b, h) = (seq.steps, seq.batch, p.hidden_size);
    let n = b * h;
    let mut h_prev = vec![0.0; n];
    let mut h_next = vec![0.0; n];
    let mut rec = StepRecord::new(n);
    let mut pre = Vec::new();
    // Projected one step at a time: nothing is kept, so the buffers stay small.
    let mut proj: [Vec<f64>; 3] = Default::default();
    let row = b * p.input_size;
    for t in 0..t_len {
        project_inputs_into(p, &seq.inputs[t * row..(t + 1) * row], b, &mut proj);
        let [xu, xr, xh] = &proj;
        step_core(p, xu, xr, xh, &h_prev, b, &mut h_next, &mut rec, &mut pre, false);
        std::mem::swap(&mut h_prev, &mut h_next);
    }
    Matrix::from_vec(b, h, h_prev).map_err(|e| Error::Numerical(format!("hidden state diverged: {e}")))
}

/// Gradients for every GRU parameter, summed over batch and time.
#[derive(Debug, Clone, PartialEq)]
pub struct GruGrads {
    pub w_u: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub v_u: Matrix,
    pub v_r: Matrix,
    pub v_h: Matrix,
    pub b_u: Vector,
    pub b_r: Vector,
    pub b_h: Vector,
    pub update_alphas: Matrix,
    pub update_gammas: Vector,
    pub reset_alphas: Matrix,
    pub reset_gammas: Vector,
}

impl GruGrads {
    pub fn zeros_like(p: &GruParams) -> Self {
        let (i, h) = (p.input_size, p.hidden_size);
        let d = p.update_gate.dict_size();
        Self {
            w_u: Matrix::zeros(h, i),
            w_r: Matrix::zeros(h, i),
            w_h: Matrix::zeros(h, i),
            v_u: Matrix::zeros(h, h),
            v_r: Matrix::zeros(h, h),
            v_h: Matrix::zeros(h, h),
            b_u: Vector::zeros(h),
            b_r: Vector::zeros(h),
            b_h: Vector::zeros(h),
            update_alphas: Matrix::zeros(h, d),
            update_gammas: Vector::zeros(h),
            reset_alphas: Matrix::zeros(h, p.reset_gate.dict_size()),
            reset_gammas: Vector::zeros(h),
        }
    }
}

fn add_col_sums(acc: &mut [f64], rows: &[f64]) {
    for row in rows.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Backpropagation through time from `∂L/∂h_T`.
///
/// Takes the cache by value; a cache serves exactly one backward pass.
pub fn unroll_backward(p: &GruParams, cache: UnrollCache, d_h_final: &Matrix) -> Result<GruGrads> {
    backprop(p, &cache, d_h_final, &mut Default::default()).map(|(g, _)| g)
}

/// [`unroll_backward`] for the cache left in `ws` by [`unroll_forward_in`].
pub fn unroll_backward_in(p: &GruParams, ws: &mut Workspace, d_h_final: &Matrix) -> Result<GruGrads> {
    let cache = ws.cache.as_ref().ok_or_else(|| Error::Usage("no forward pass to differentiate".into()))?;
    backprop(p, cache, d_h_final, &mut ws.pre_grads).map(|(g, _)| g)
}

/// BPTT core; also returns `∂L/∂h_0`.
fn backprop(
    p: &GruParams,
    cache: &UnrollCache,
    d_h_final: &Matrix,
    pre_grads: &mut [Vec<f64>; 3],
) -> Result<(GruGrads, Vec<f64>)> {
    p.check()?;
    let (t_len, b, h, i) = (cache.steps, cache.batch, cache.hidden_size, cache.input_size);
    if h != p.hidden_size || i != p.input_size {
        return Err(Error::Usage("cache was produced by a network of a different size".into()));
    }
    if d_h_final.shape() != (b, h) {
        return Err(Error::Usage(format!(
            "upstream gradient is {}x{}, cache holds batch {b} hidden {h}",
            d_h_final.rows(),
            d_h_final.cols()
        )));
    }
    let n = b * h;
    let mut g = GruGrads::zeros_like(p);
    let mut dh = d_h_final.as_slice().to_vec();
    let mut dh_prev = vec![0.0; n];
    let mut drh = vec![0.0; n];
    let mut du = vec![0.0; n];
    let mut dr = vec![0.0; n];
    // Pre-activation gradients for all steps, for the input-weight products.
    // Every entry is written before it is read.
    for buf in pre_grads.iter_mut() {
        buf.resize(t_len * n, 0.0);
    }
    let [dpre_u, dpre_r, dpre_c] = pre_grads;

    for t in (0..t_len).rev() {
        let rec = &cache.records[t];
        let h_prev = cache.state(t);
        let span = t * n..(t + 1) * n;

        let dc_pre = &mut dpre_c[span.clone()];
        for k in 0..n {
            let u = rec.u[k];
            let c = rec.c[k];
            let d = dh[k];
            dc_pre[k] = d * u * (1.0 - c * c);
            du[k] = d * (c - h_prev[k]);
            dh_prev[k] = d * (1.0 - u);
        }
        gemm_raw(1.0, dc_pre, (b, h), Op::T, &rec.rh, (b, h), Op::N, 1.0, g.v_h.as_mut_slice(), h);
        add_col_sums(&mut g.b_h, dc_pre);
        gemm_raw(1.0, dc_pre, (b, h), Op::N, p.v_h.as_slice(), (h, h), Op::N, 0.0, &mut drh, h);
        for k in 0..n {
            dr[k] = drh[k] * h_prev[k];
            dh_prev[k] += drh[k] * rec.r[k];
        }

        let dr_pre = &mut dpre_r[span.clone()];
        gate_backward_accumulate(&p.reset_gate, &rec.r_cache, &dr, dr_pre, &mut g.reset_alphas, &mut g.reset_gammas);
        let du_pre = &mut dpre_u[span];
        gate_backward_accumulate(&p.update_gate, &rec.u_cache, &du, du_pre, &mut g.update_alphas, &mut g.update_gammas);

        gemm_raw(1.0, du_pre, (b, h), Op::T, h_prev, (b, h), Op::N, 1.0, g.v_u.as_mut_slice(), h);
        gemm_raw(1.0, dr_pre, (b, h), Op::T, h_prev, (b, h), Op::N, 1.0, g.v_r.as_mut_slice(), h);
        add_col_sums(&mut g.b_u, du_pre);
        add_col_sums(&mut g.b_r, dr_pre);
        gemm_raw(1.0, du_pre, (b, h), Op::N, p.v_u.as_slice(), (h, h), Op::N, 1.0, &mut dh_prev, h);
        gemm_raw(1.0, dr_pre, (b, h), Op::N, p.v_r.as_slice(), (h, h), Op::N, 1.0, &mut dh_prev, h);

        std::mem::swap(&mut dh, &mut dh_prev);
    }

    let rows = t_len * b;
    for (dw, dpre) in [(&mut g.w_u, &*dpre_u), (&mut g.w_r, &*dpre_r), (&mut g.w_h, &*dpre_c)] {
        gemm_raw(1.0, &dpre[..rows * h], (rows, h), Op::T, &cache.inputs, (rows, i), Op::N, 0.0, dw.as_mut_slice(), i);
    }
    Ok((g, dh))
}

/// Backward pass of a single [`cell_step`]: parameter gradients plus
/// `∂L/∂h_{t-1}`.
pub fn step_backward(p: &GruParams, cache: StepCache, d_h: &Matrix) -> Result<(GruGrads, Matrix)> {
    let b = cache.x.rows();
    let h = p.hidden_size;
    let mut states = cache.h_prev.into_vec();
    states.resize(2 * b * h, 0.0);
    let unroll = UnrollCache {
        steps: 1,
        batch: b,
        input_size: p.input_size,
        hidden_size: h,
        inputs: cache.x.into_vec(),
        states,
        records: vec![cache.record],
    };
    let (grads, d_prev) = backprop(p, &unroll, d_h, &mut Default::default())?;
    Ok((grads, Matrix::from_vec(b, h, d_prev)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kafgate::{make_dictionary, GateKind};
    use crate::numerics::{matmul, sigmoid};

    fn params(input: usize, hidden: usize, d: usize, variant: GateVariant, seed: u64) -> GruParams {
        let dict = Arc::new(make_dictionary(d, -4.0, 4.0).unwrap());
        let opts = GruInit { input_size: input, hidden_size: hidden, variant, ridge_epsilon: 1e-4, random_alpha_scale: 0.3 };
        GruParams::init(opts, dict, &mut Rng::new(seed)).unwrap()
    }

    fn random_seq(steps: usize, batch: usize, features: usize, rng: &mut Rng) -> SequenceBatch {
        let inputs = (0..steps * batch * features).map(|_| rng.uniform(0.0, 1.0)).collect();
        SequenceBatch::from_parts(steps, batch, features, inputs, vec![0; batch]).unwrap()
    }

    fn perturb(p: &mut GruParams, rng: &mut Rng) {
        for b in [&mut p.b_u, &mut p.b_r, &mut p.b_h] {
            b.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
        for gate in [&mut p.update_gate, &mut p.reset_gate] {
            gate.alphas.as_mut_slice().iter_mut().for_each(|a| *a += rng.normal(0.0, 0.5));
            gate.gammas.iter_mut().for_each(|g| *g = rng.uniform(0.1, 0.8));
        }
    }

    #[test]
    fn forced_gates() {
        let mut p = params(3, 4, 5, GateVariant::STANDARD, 1);
        let mut rng = Rng::new(2);
        let x = Matrix::from_fn(2, 3, |_, _| rng.uniform(0.0, 1.0));
        let hp = Matrix::from_fn(2, 4, |_, _| rng.uniform(-1.0, 1.0));

        p.b_u = Vector::filled(4, -1000.0);
        let (h, _) = cell_step(&p, &x, &hp).unwrap();
        assert_eq!(h, hp);

        p.b_u = Vector::filled(4, 1000.0);
        let (h, cache) = cell_step(&p, &x, &hp).unwrap();
        assert_eq!(h.as_slice(), cache.candidate());
    }

    #[test]
    fn zero_weights_halve_state() {
        let mut p = params(3, 4, 5, GateVariant::STANDARD, 1);
        for m in [&mut p.w_u, &mut p.w_r, &mut p.w_h, &mut p.v_u, &mut p.v_r, &mut p.v_h] {
            m.fill(0.0);
        }
        let x = Matrix::from_fn(2, 3, |r, c| (r + c) as f64);
        let hp = Matrix::from_fn(2, 4, |r, c| 0.3 * r as f64 - 0.2 * c as f64);
        let (h, cache) = cell_step(&p, &x, &hp).unwrap();
        assert!(cache.update_gate().iter().chain(cache.reset_gate()).all(|g| *g == 0.5));
        for (a, b) in h.as_slice().iter().zip(hp.as_slice()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn shape_errors() {
        let p = params(3, 4, 5, GateVariant::KAF, 1);
        assert!(matches!(cell_step(&p, &Matrix::zeros(2, 2), &Matrix::zeros(2, 4)), Err(Error::Shape(_))));
        assert!(matches!(cell_step(&p, &Matrix::zeros(2, 3), &Matrix::zeros(3, 4)), Err(Error::Shape(_))));
        let empty = SequenceBatch::from_parts(0, 2, 3, vec![], vec![0, 0]).unwrap();
        assert!(matches!(unroll_forward(&p, &empty), Err(Error::Parameter(_))));
    }

    #[test]
    fn one_step_unroll_equals_cell_step() {
        let p = params(3, 4, 5, GateVariant::KAF, 7);
        let mut rng = Rng::new(3);
        let seq = random_seq(1, 2, 3, &mut rng);
        let (h, _) = unroll_forward(&p, &seq).unwrap();
        let x = Matrix::from_vec(2, 3, seq.inputs.clone()).unwrap();
        let (h2, _) = cell_step(&p, &x, &Matrix::zeros(2, 4)).unwrap();
        assert_eq!(h, h2);
        assert_eq!(unroll_inference(&p, &seq).unwrap(), h);
    }

    #[test]
    fn identical_batch_rows() {
        let p = params(3, 4, 5, GateVariant::KAF, 7);
        let mut rng = Rng::new(3);
        let one = random_seq(6, 1, 3, &mut rng);
        let mut inputs = Vec::new();
        for t in 0..6 {
            inputs.extend_from_slice(&one.inputs[t * 3..t * 3 + 3]);
            inputs.extend_from_slice(&one.inputs[t * 3..t * 3 + 3]);
        }
        let two = SequenceBatch::from_parts(6, 2, 3, inputs, vec![0, 0]).unwrap();
        let (h, _) = unroll_forward(&p, &two).unwrap();
        assert_eq!(h.row(0), h.row(1));
    }

    /// Scalar hand-unroll of a hidden-2, input-1 network over 3 steps.
    #[test]
    fn hand_unrolled_toy() {
        let mut p = params(1, 2, 5, GateVariant::STANDARD, 1);
        let set = |m: &mut Matrix, v: &[f64]| m.as_mut_slice().copy_from_slice(v);
        set(&mut p.w_u, &[0.5, -0.3]);
        set(&mut p.w_r, &[0.2, 0.4]);
        set(&mut p.w_h, &[-0.6, 0.9]);
        set(&mut p.v_u, &[0.1, 0.2, -0.1, 0.3]);
        set(&mut p.v_r, &[-0.2, 0.1, 0.05, 0.15]);
        set(&mut p.v_h, &[0.3, -0.4, 0.2, 0.1]);
        p.b_u = vec![0.1, -0.1].into();
        p.b_r = vec![0.0, 0.2].into();
        p.b_h = vec![-0.05, 0.05].into();
        let xs = [0.7, -1.2, 0.4];
        let seq = SequenceBatch::from_parts(3, 1, 1, xs.to_vec(), vec![0]).unwrap();
        let (h, _) = unroll_forward(&p, &seq).unwrap();

        let mut hs = [0.0f64; 2];
        for x in xs {
            let u: Vec<f64> = (0..2)
                .map(|j| sigmoid(p.w_u[(j, 0)] * x + p.v_u[(j, 0)] * hs[0] + p.v_u[(j, 1)] * hs[1] + p.b_u[j]))
                .collect();
            let r: Vec<f64> = (0..2)
                .map(|j| sigmoid(p.w_r[(j, 0)] * x + p.v_r[(j, 0)] * hs[0] + p.v_r[(j, 1)] * hs[1] + p.b_r[j]))
                .collect();
            let c: Vec<f64> = (0..2)
                .map(|j| {
                    (p.w_h[(j, 0)] * x + p.v_h[(j, 0)] * r[0] * hs[0] + p.v_h[(j, 1)] * r[1] * hs[1] + p.b_h[j]).tanh()
                })
                .collect();
            hs = [(1.0 - u[0]) * hs[0] + u[0] * c[0], (1.0 - u[1]) * hs[1] + u[1] * c[1]];
        }
        for j in 0..2 {
            assert!((h[(0, j)] - hs[j]).abs() < 1e-12);
        }
    }

    /// Classic GRU coded directly from matrix products.
    #[test]
    fn standard_variant_matches_classic_gru_bitwise() {
        let mut p = params(5, 6, 5, GateVariant::STANDARD, 19);
        let mut rng = Rng::new(20);
        perturb(&mut p, &mut rng);
        let seq = random_seq(9, 4, 5, &mut rng);
        let (h, _) = unroll_forward(&p, &seq).unwrap();

        let mut state = Matrix::zeros(4, 6);
        for t in 0..9 {
            let x = Matrix::from_vec(4, 5, seq.inputs[t * 20..(t + 1) * 20].to_vec()).unwrap();
            let lin = |w: &Matrix, v: &Matrix, hin: &Matrix, b: &Vector| {
                let xw = matmul(&x, &w.transpose()).unwrap();
                let hv = matmul(hin, &v.transpose()).unwrap();
                Matrix::from_fn(4, 6, |r, c| xw[(r, c)] + hv[(r, c)] + b[c])
            };
            let u = lin(&p.w_u, &p.v_u, &state, &p.b_u);
            let r = lin(&p.w_r, &p.v_r, &state, &p.b_r);
            let u = Matrix::from_fn(4, 6, |a, b| sigmoid(u[(a, b)]));
            let r = Matrix::from_fn(4, 6, |a, b| sigmoid(r[(a, b)]));
            let rh = Matrix::from_fn(4, 6, |a, b| r[(a, b)] * state[(a, b)]);
            let c = lin(&p.w_h, &p.v_h, &rh, &p.b_h);
            state = Matrix::from_fn(4, 6, |a, b| (1.0 - u[(a, b)]) * state[(a, b)] + u[(a, b)] * c[(a, b)].tanh());
        }
        for (a, b) in h.as_slice().iter().zip(state.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn convexity_and_gate_bounds() {
        for variant in [GateVariant::STANDARD, GateVariant::KAF, GateVariant::NO_RESIDUAL, GateVariant::KAF_RANDOM] {
            let mut p = params(3, 5, 6, variant, 4);
            let mut rng = Rng::new(5);
            perturb(&mut p, &mut rng);
            let seq = random_seq(12, 3, 3, &mut rng);
            let (_, cache) = unroll_forward(&p, &seq).unwrap();
            for t in 0..12 {
                let prev = cache.state(t);
                let next = cache.state(t + 1);
                let c = cache.candidate(t);
                for k in 0..prev.len() {
                    let (lo, hi) = if prev[k] < c[k] { (prev[k], c[k]) } else { (c[k], prev[k]) };
                    assert!(next[k] >= lo - 1e-15 && next[k] <= hi + 1e-15);
                    assert!(next[k].abs() <= prev[k].abs().max(1.0));
                }
                assert!(cache.update_gate(t).iter().chain(cache.reset_gate(t)).all(|g| *g > 0.0 && *g < 1.0));
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = params(3, 4, 5, GateVariant::KAF, 7);
        let seq = random_seq(5, 2, 3, &mut Rng::new(1));
        let (_, cache) = unroll_forward(&p, &seq).unwrap();
        let g = unroll_backward(&p, cache, &Matrix::zeros(2, 4)).unwrap();
        assert_eq!(g, GruGrads::zeros_like(&p));
    }

    #[test]
    fn backward_rejects_mismatched_shapes() {
        let p = params(3, 4, 5, GateVariant::KAF, 7);
        let seq = random_seq(5, 2, 3, &mut Rng::new(1));
        let (_, cache) = unroll_forward(&p, &seq).unwrap();
        assert!(matches!(unroll_backward(&p, cache, &Matrix::zeros(3, 4)), Err(Error::Usage(_))));
        let other = params(3, 6, 5, GateVariant::KAF, 7);
        let (_, cache) = unroll_forward(&p, &seq).unwrap();
        assert!(matches!(unroll_backward(&other, cache, &Matrix::zeros(2, 6)), Err(Error::Usage(_))));
    }

    /// One step with standard gates, differentiated equation by equation.
    #[test]
    fn single_step_analytic() {
        let mut p = params(2, 3, 5, GateVariant::STANDARD, 8);
        let mut rng = Rng::new(9);
        perturb(&mut p, &mut rng);
        let seq = random_seq(1, 1, 2, &mut rng);
        let x = &seq.inputs;
        let up: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (_, cache) = unroll_forward(&p, &seq).unwrap();
        let g = unroll_backward(&p, cache, &Matrix::from_vec(1, 3, up.clone()).unwrap()).unwrap();

        // h_0 = 0: r has no effect, u = σ(W_u x + b_u), c = tanh(W_h x + b_h), h = u c.
        for j in 0..3 {
            let su = p.w_u[(j, 0)] * x[0] + p.w_u[(j, 1)] * x[1] + p.b_u[j];
            let sc = p.w_h[(j, 0)] * x[0] + p.w_h[(j, 1)] * x[1] + p.b_h[j];
            let (u, c) = (sigmoid(su), sc.tanh());
            let d_su = up[j] * c * u * (1.0 - u);
            let d_sc = up[j] * u * (1.0 - c * c);
            assert!((g.b_u[j] - d_su).abs() < 1e-14);
            assert!((g.b_h[j] - d_sc).abs() < 1e-14);
            assert_eq!(g.b_r[j], 0.0);
            for k in 0..2 {
                assert!((g.w_u[(j, k)] - d_su * x[k]).abs() < 1e-14);
                assert!((g.w_h[(j, k)] - d_sc * x[k]).abs() < 1e-14);
            }
        }
        assert_eq!(g.v_u.max_abs() + g.v_r.max_abs() + g.v_h.max_abs(), 0.0);
    }

    fn grad_check(variant: GateVariant) {
        let mut p = params(3, 4, 5, variant, 11);
        let mut rng = Rng::new(12);
        perturb(&mut p, &mut rng);
        let seq = random_seq(7, 3, 3, &mut rng);
        let w = Matrix::from_fn(3, 4, |_, _| rng.uniform(-1.0, 1.0));
        let loss = |p: &GruParams| -> f64 {
            let h = unroll_inference(p, &seq).unwrap();
            h.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = unroll_forward(&p, &seq).unwrap();
        let g = unroll_backward(&p, cache, &w).unwrap();

        let step = 1e-5;
        let check = |name: &str, an: &[f64], get: &dyn Fn(&mut GruParams) -> &mut [f64]| {
            for idx in 0..an.len() {
                let mut pp = p.clone();
                get(&mut pp)[idx] += step;
                let mut pm = p.clone();
                get(&mut pm)[idx] -= step;
                let fd = (loss(&pp) - loss(&pm)) / (2.0 * step);
                let err = (an[idx] - fd).abs();
                assert!(
                    err <= 1e-8 || err / an[idx].abs().max(fd.abs()) <= 1e-5,
                    "{variant:?} {name}[{idx}]: analytic {} fd {fd}",
                    an[idx]
                );
            }
        };
        check("w_u", g.w_u.as_slice(), &|p| p.w_u.as_mut_slice());
        check("w_r", g.w_r.as_slice(), &|p| p.w_r.as_mut_slice());
        check("w_h", g.w_h.as_slice(), &|p| p.w_h.as_mut_slice());
        check("v_u", g.v_u.as_slice(), &|p| p.v_u.as_mut_slice());
        check("v_r", g.v_r.as_slice(), &|p| p.v_r.as_mut_slice());
        check("v_h", g.v_h.as_slice(), &|p| p.v_h.as_mut_slice());
        check("b_u", &g.b_u, &|p| &mut p.b_u);
        check("b_r", &g.b_r, &|p| &mut p.b_r);
        check("b_h", &g.b_h, &|p| &mut p.b_h);
        check("update_alphas", g.update_alphas.as_slice(), &|p| p.update_gate.alphas.as_mut_slice());
        check("update_gammas", &g.update_gammas, &|p| &mut p.update_gate.gammas);
        check("reset_alphas", g.reset_alphas.as_slice(), &|p| p.reset_gate.alphas.as_mut_slice());
        check("reset_gammas", &g.reset_gammas, &|p| &mut p.reset_gate.gammas);
        if variant.kind == GateKind::Standard {
            assert_eq!(g.update_alphas.max_abs() + g.reset_gammas.norm_inf(), 0.0);
        }
    }

    #[test]
    fn bptt_matches_finite_differences_kaf() {
        grad_check(GateVariant::KAF);
    }

    #[test]
    fn bptt_matches_finite_differences_standard() {
        grad_check(GateVariant::STANDARD);
    }

    #[test]
    fn bptt_matches_finite_differences_no_residual() {
        grad_check(GateVariant::NO_RESIDUAL);
    }

    #[test]
    fn step_backward_state_gradient() {
        let mut p = params(3, 4, 5, GateVariant::KAF, 13);
        let mut rng = Rng::new(14);
        perturb(&mut p, &mut rng);
        let x = Matrix::from_fn(2, 3, |_, _| rng.uniform(0.0, 1.0));
        let hp = Matrix::from_fn(2, 4, |_, _| rng.uniform(-0.8, 0.8));
        let w = Matrix::from_fn(2, 4, |_, _| rng.uniform(-1.0, 1.0));
        let (_, cache) = cell_step(&p, &x, &hp).unwrap();
        let (grads, d_prev) = step_backward(&p, cache, &w).unwrap();
        let loss = |hp: &Matrix| -> f64 {
            let (h, _) = cell_step(&p, &x, hp).unwrap();
            h.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        for k in 0..8 {
            let mut a = hp.clone();
            a.as_mut_slice()[k] += 1e-5;
            let mut b = hp.clone();
            b.as_mut_slice()[k] -= 1e-5;
            let fd = (loss(&a) - loss(&b)) / 2e-5;
            assert!((d_prev.as_slice()[k] - fd).abs() <= 1e-8 + 1e-6 * fd.abs());
        }
        // V gradients are nonzero now that h_prev is not zero.
        assert!(grads.v_u.max_abs() > 0.0 && grads.v_h.max_abs() > 0.0);
    }
}
