//! Kernel activation functions and the flexible gate built on them.
//!
//! A KAF is a per-unit expansion `KAF(s) = Σ_i α_i κ(s, d_i)` over a fixed,
//! equispaced dictionary `d` with Gaussian kernel
//! `κ(s, d_i) = exp(-γ (s - d_i)²)`. The gate squashes it through a sigmoid,
//! optionally with a residual term:
//!
//! ```text
//! KafResidual:    g(s) = σ(½·KAF(s) + ½·s)
//! KafNoResidual:  g(s) = σ(KAF(s))
//! Standard:       g(s) = σ(s)
//! ```
//!
//! Far from the dictionary `KAF(s) → 0`, so the residual gate tends to
//! `σ(s/2)` and the no-residual gate to `σ(0) = 0.5`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::{dispatch, exp_in_place, sigmoid, sigmoid_into, solve_spd, Matrix, Rng, Vector};
use crate::{Error, Result};

/// Lower bound applied to every bandwidth after an optimizer step.
pub const MIN_GAMMA: f64 = 1e-4;

/// Fixed, equispaced kernel centres shared by every gate of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    elements: Vec<f64>,
    delta: f64,
}

impl Dictionary {
    pub fn elements(&self) -> &[f64] {
        &self.elements
    }

    /// Spacing between consecutive elements.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.elements[0]
    }

    pub fn hi(&self) -> f64 {
        self.elements[self.elements.len() - 1]
    }
}

/// `count` points from `lo` to `hi` inclusive.
pub fn make_dictionary(count: usize, lo: f64, hi: f64) -> Result<Dictionary> {
    if count < 2 {
        return Err(Error::Parameter(format!("dictionary needs at least 2 elements, got {count}")));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!("dictionary range [{lo}, {hi}] is empty")));
    }
    let delta = (hi - lo) / (count - 1) as f64;
    let mut elements: Vec<f64> = (0..count).map(|i| lo + delta * i as f64).collect();
    elements[count - 1] = hi;
    Ok(Dictionary { elements, delta })
}

/// Bandwidth heuristic `γ = 1 / (6Δ²)`.
pub fn rule_of_thumb_gamma(delta: f64) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Parameter(format!("dictionary resolution must be positive, got {delta}")));
    }
    Ok(1.0 / (6.0 * delta * delta))
}

#[inline]
pub fn gauss_kernel(s: f64, d_i: f64, gamma: f64) -> f64 {
    let diff = s - d_i;
    (-gamma * diff * diff).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    Standard,
    KafResidual,
    KafNoResidual,
}

impl GateKind {
    pub fn uses_kaf(self) -> bool {
        !matches!(self, GateKind::Standard)
    }

    /// `(a, b)` with the gate being `σ(a·KAF(s) + b·s)`.
    pub(crate) fn mix(self) -> (f64, f64) {
        match self {
            GateKind::Standard => (0.0, 1.0),
            GateKind::KafResidual => (0.5, 0.5),
            GateKind::KafNoResidual => (1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateInit {
    Identity,
    Random,
}

/// Gate shape plus how its mixing coefficients start. `Standard` ignores
/// `init`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateVariant {
    pub kind: GateKind,
    pub init: GateInit,
}

impl GateVariant {
    pub const STANDARD: GateVariant = GateVariant { kind: GateKind::Standard, init: GateInit::Identity };
    pub const KAF: GateVariant = GateVariant { kind: GateKind::KafResidual, init: GateInit::Identity };
    pub const KAF_RANDOM: GateVariant = GateVariant { kind: GateKind::KafResidual, init: GateInit::Random };
    pub const NO_RESIDUAL: GateVariant = GateVariant { kind: GateKind::KafNoResidual, init: GateInit::Identity };

    /// Short stable label used in file names and summaries.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.init) {
            (GateKind::Standard, _) => "standard",
            (GateKind::KafResidual, GateInit::Identity) => "kaf",
            (GateKind::KafResidual, GateInit::Random) => "kaf-rand",
            (GateKind::KafNoResidual, GateInit::Identity) => "kaf-nores",
            (GateKind::KafNoResidual, GateInit::Random) => "kaf-nores-rand",
        }
    }

    /// Inverse of [`GateVariant::label`].
    pub fn parse(label: &str) -> Option<Self> {
        let init = GateInit::Random;
        match label {
            "standard" => Some(Self::STANDARD),
            "kaf" => Some(Self::KAF),
            "kaf-rand" => Some(Self::KAF_RANDOM),
            "kaf-nores" => Some(Self::NO_RESIDUAL),
            "kaf-nores-rand" => Some(GateVariant { kind: GateKind::KafNoResidual, init }),
            _ => None,
        }
    }
}

/// Learnable state of one gate: a row of mixing coefficients and one
/// bandwidth per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct KafGateParams {
    dictionary: Arc<Dictionary>,
    /// `units x D`.
    pub alphas: Matrix,
    pub gammas: Vector,
}

impl KafGateParams {
    pub fn new(dictionary: Arc<Dictionary>, alphas: Matrix, gammas: Vector) -> Result<Self> {
        if alphas.cols() != dictionary.len() || alphas.rows() != gammas.len() {
            return Err(Error::Shape(format!(
                "alphas {}x{} and {} gammas do not fit a {}-element dictionary",
                alphas.rows(),
                alphas.cols(),
                gammas.len(),
                dictionary.len()
            )));
        }
        if gammas.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::Parameter("every gamma must be positive".into()));
        }
        Ok(Self { dictionary, alphas, gammas })
    }

    pub fn dictionary(&self) -> &Arc<Dictionary> {
        &self.dictionary
    }

    pub fn units(&self) -> usize {
        self.alphas.rows()
    }

    pub fn dict_size(&self) -> usize {
        self.alphas.cols()
    }

    /// `KAF_unit(s)` evaluated term by term.
    pub fn kaf_eval(&self, unit: usize, s: f64) -> f64 {
        let gamma = self.gammas[unit];
        self.alphas
            .row(unit)
            .iter()
            .zip(self.dictionary.elements())
            .map(|(a, d)| a * gauss_kernel(s, *d, gamma))
            .sum()
    }

    /// Scalar gate value for one unit.
    pub fn gate_eval(&self, kind: GateKind, unit: usize, s: f64) -> f64 {
        match kind {
            GateKind::Standard => sigmoid(s),
            GateKind::KafResidual => sigmoid(0.5 * self.kaf_eval(unit, s) + 0.5 * s),
            GateKind::KafNoResidual => sigmoid(self.kaf_eval(unit, s)),
        }
    }

    /// Clamps every bandwidth to at least [`MIN_GAMMA`].
    pub fn project_gammas(&mut self) {
        for g in self.gammas.iter_mut() {
            if !(*g >= MIN_GAMMA) {
                *g = MIN_GAMMA;
            }
        }
    }
}

/// Ridge-regression coefficients making `KAF(s) ≈ s` on the dictionary,
/// i.e. the solution of `(K + εI)α = d`, and the bandwidth they assume.
pub fn identity_coefficients(dict: &Dictionary, epsilon: f64) -> Result<(Vector, f64)> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("ridge epsilon must be positive, got {epsilon}")));
    }
    let gamma = rule_of_thumb_gamma(dict.delta())?;
    let d = dict.elements();
    let k = Matrix::from_fn(d.len(), d.len(), |i, j| {
        gauss_kernel(d[i], d[j], gamma) + if i == j { epsilon } else { 0.0 }
    });
    Ok((solve_spd(&k, d)?, gamma))
}

pub fn identity_init(dict: Arc<Dictionary>, units: usize, epsilon: f64) -> Result<KafGateParams> {
    let (alpha, gamma) = identity_coefficients(&dict, epsilon)?;
    let alphas = Matrix::from_fn(units, dict.len(), |_, i| alpha[i]);
    KafGateParams::new(dict, alphas, Vector::filled(units, gamma))
}

/// Mixing coefficients drawn i.i.d. from `N(0, scale²)`.
pub fn random_init(dict: Arc<Dictionary>, units: usize, rng: &mut Rng, scale: f64) -> Result<KafGateParams> {
    if !(scale > 0.0) {
        return Err(Error::Parameter(format!("random init scale must be positive, got {scale}")));
    }
    let gamma = rule_of_thumb_gamma(dict.delta())?;
    let alphas = Matrix::from_fn(units, dict.len(), |_, _| rng.normal(0.0, scale));
    KafGateParams::new(dict, alphas, Vector::filled(units, gamma))
}

/// Fills `out[i] = exp(-γ (s - d_i)²)` for an equispaced dictionary.
///
/// Only the centre nearest to `s` gets a direct exponential; neighbours are
/// reached by multiplying ratios that never exceed one, so nothing overflows
/// and terms underflow only when they are genuinely negligible.
/// `q` must be `exp(-2γΔ²)`.
#[inline]
fn kernel_row(s: f64, gamma: f64, elements: &[f64], delta: f64, q: f64, out: &mut [f64]) {
    let n = elements.len();
    let pos = ((s - elements[0]) / delta).round();
    let j = if pos <= 0.0 {
        0
    } else if pos >= (n - 1) as f64 {
        n - 1
    } else {
        pos as usize
    };
    let diff = s - elements[j];
    out[j] = (-gamma * diff * diff).exp();
    let gd = gamma * delta;
    let up = (2.0 * gd * diff - gd * delta).exp();
    let mut ratio = up;
    for i in j + 1..n {
        out[i] = out[i - 1] * ratio;
        ratio *= q;
    }
    if j > 0 {
        // The first upward and downward ratios multiply to q.
        let mut ratio = if up > 1e-200 && up < 1e200 { q / up } else { (-2.0 * gd * diff - gd * delta).exp() };
        for i in (0..j).rev() {
            out[i] = out[i + 1] * ratio;
            ratio *= q;
        }
    }
}

/// Intermediates saved by [`gate_forward`] for [`gate_backward`].
#[derive(Debug, Clone)]
pub struct GateCache {
    kind: GateKind,
    rows: usize,
    units: usize,
    dict_size: usize,
    s: Vec<f64>,
    /// Per element: first kernel term before the per-unit factor, and the
    /// ratio between consecutive terms. Empty for `Standard`.
    start: Vec<f64>,
    step: Vec<f64>,
    /// `D x units` factors `exp(-γ_j Δ² m_i²)`.
    factors: Vec<f64>,
    /// Some element fell outside the fast-path guard.
    slow: bool,
    out: Vec<f64>,
}

impl GateCache {
    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn output(&self) -> &[f64] {
        &self.out
    }

    pub(crate) fn empty() -> Self {
        GateCache {
            kind: GateKind::Standard,
            rows: 0,
            units: 0,
            dict_size: 0,
            s: Vec::new(),
            start: Vec::new(),
            step: Vec::new(),
            factors: Vec::new(),
            slow: false,
            out: Vec::new(),
        }
    }
}

/// Gradients of a gate with respect to its pre-activation and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub d_s: Matrix,
    pub d_alphas: Matrix,
    pub d_gammas: Vector,
}

fn check_units(params: &KafGateParams, kind: GateKind, cols: usize) -> Result<()> {
    if kind.uses_kaf() && cols != params.units() {
        return Err(Error::Shape(format!(
            "gate has {} units, pre-activation has {cols} columns",
            params.units()
        )));
    }
    Ok(())
}

// Batched kernel evaluation. With u = s - centre and d_i = centre + m_i·Δ,
//
//   κ_i = exp(-γ(u - m_iΔ)²) = exp(-γu² + 2m_iγΔu) · exp(-γΔ²m_i²)
//
// so a row of kernels is a geometric sequence (start p, ratio e) times a
// per-unit factor table. Every intermediate stays within exp(±FAST_LIMIT)
// while γ(|u| + HΔ)² <= FAST_LIMIT, H = (D-1)/2; other elements take the
// scalar path through `kernel_row`.
const FAST_LIMIT: f64 = 600.0;

struct Layout {
    centre: f64,
    half_span: f64,
    delta: f64,
    /// `m_i·Δ` per dictionary element.
    offsets: Vec<f64>,
}

impl Layout {
    fn new(dict: &Dictionary) -> Self {
        let centre = 0.5 * (dict.lo() + dict.hi());
        let half = 0.5 * (dict.len() - 1) as f64;
        let delta = dict.delta();
        Layout {
            centre,
            half_span: half * delta,
            delta,
            offsets: (0..dict.len()).map(|i| (i as f64 - half) * delta).collect(),
        }
    }

    #[inline]
    fn fast(&self, u: f64, gamma: f64) -> bool {
        let w = u.abs() + self.half_span;
        gamma * w * w <= FAST_LIMIT
    }

    /// Logs of the start and ratio of the geometric part for one element.
    #[inline]
    fn sequence_args(&self, u: f64, gamma: f64) -> (f64, f64) {
        let gdu = gamma * self.delta * u;
        (-gamma * u * u - 2.0 * gdu * (self.half_span / self.delta), 2.0 * gdu)
    }
}

/// `D x units` table of `exp(-γ_j Δ² m_i²)`.
fn factor_table(layout: &Layout, gammas: &[f64]) -> Vec<f64> {
    let d = layout.offsets.len();
    let units = gammas.len();
    let mut t = vec![0.0; d * units];
    for i in 0..d {
        let mirror = d - 1 - i;
        if mirror < i {
            let (lo, hi) = t.split_at_mut(i * units);
            hi[..units].copy_from_slice(&lo[mirror * units..(mirror + 1) * units]);
            continue;
        }
        let o2 = layout.offsets[i] * layout.offsets[i];
        let row = &mut t[i * units..(i + 1) * units];
        for (v, g) in row.iter_mut().zip(gammas) {
            *v = -g * o2;
        }
        exp_in_place(row);
    }
    t
}

/// `alphas` (`units x D`) transposed to `D x units`.
fn transposed(alphas: &Matrix) -> Vec<f64> {
    let (units, d) = alphas.shape();
    let a = alphas.as_slice();
    let mut t = vec![0.0; d * units];
    for j in 0..units {
        for i in 0..d {
            t[i * units + j] = a[j * d + i];
        }
    }
    t
}

dispatch!(
    /// Logs of the geometric start and ratio per element, zero on slow-path
    /// elements. Returns whether any element needs the slow path.
    fn sequence_args(s: &[f64], gammas: &[f64], layout: &Layout, start: &mut [f64], step: &mut [f64]) -> bool {
        let units = gammas.len();
        let mut slow = false;
        let rows = s.chunks_exact(units).zip(start.chunks_exact_mut(units)).zip(step.chunks_exact_mut(units));
        for ((srow, a), b) in rows {
            for j in 0..units {
                let u = srow[j] - layout.centre;
                let fast = layout.fast(u, gammas[j]);
                let (x, y) = layout.sequence_args(u, gammas[j]);
                a[j] = if fast { x } else { 0.0 };
                b[j] = if fast { y } else { 0.0 };
                slow |= !fast;
            }
        }
        slow
    }
);

/// Everything the batched expansion kernels read.
struct Expansion<'a> {
    units: usize,
    start: &'a [f64],
    step: &'a [f64],
    factors: &'a [f64],
    alpha_t: &'a [f64],
}

dispatch!(
    /// `z = scale·KAF(s) + residual·s` for every element on the fast path.
    fn expansion_rows(e: &Expansion<'_>, s: &[f64], scale: f64, residual: f64, z: &mut [f64]) {
        let units = e.units;
        let mut p = vec![0.0; units];
        let mut kaf = vec![0.0; units];
        for (r, zrow) in z.chunks_exact_mut(units).enumerate() {
            let span = r * units..(r + 1) * units;
            p.copy_from_slice(&e.start[span.clone()]);
            kaf.fill(0.0);
            let step = &e.step[span.clone()];
            for (f, a) in e.factors.chunks_exact(units).zip(e.alpha_t.chunks_exact(units)) {
                for ((((k, p), s), f), a) in kaf.iter_mut().zip(p.iter_mut()).zip(step).zip(f).zip(a) {
                    *k += a * (*p * f);
                    *p *= s;
                }
            }
            for ((o, k), x) in zrow.iter_mut().zip(&kaf).zip(&s[span]) {
                *o = scale * k + residual * x;
            }
        }
    }
);

/// Per-row inputs and outputs of the batched backward kernel.
struct GradRows<'a> {
    s: &'a [f64],
    out: &'a [f64],
    upstream: &'a [f64],
    centre: f64,
    offsets: &'a [f64],
    gammas: &'a [f64],
    d_s: &'a mut [f64],
    d_alpha_t: &'a mut [f64],
    d_gammas: &'a mut [f64],
}

dispatch!(
    /// Fast-path gradients. Slow-path elements have start 0, so they only
    /// receive the residual part of `d_s` here.
    fn expansion_grad_rows(e: &Expansion<'_>, g: GradRows<'_>, scale: f64, residual: f64) {
        let units = e.units;
        let GradRows { s, out, upstream, centre, offsets, gammas, d_s, d_alpha_t, d_gammas } = g;
        let mut du = vec![0.0; units];
        let mut coef = vec![0.0; units];
        let mut u = vec![0.0; units];
        let mut p = vec![0.0; units];
        let mut slope = vec![0.0; units];
        let mut bw = vec![0.0; units];
        let gammas = &gammas[..units];
        let d_gammas = &mut d_gammas[..units];
        for r in 0..s.len() / units {
            let span = r * units..(r + 1) * units;
            let (srow, up, gout) = (&s[span.clone()], &upstream[span.clone()], &out[span.clone()]);
            for j in 0..units {
                du[j] = up[j] * gout[j] * (1.0 - gout[j]);
                coef[j] = du[j] * scale;
                u[j] = srow[j] - centre;
            }
            p.copy_from_slice(&e.start[span.clone()]);
            slope.fill(0.0);
            bw.fill(0.0);
            let step = &e.step[span.clone()];
            let tables = e.factors.chunks_exact(units).zip(e.alpha_t.chunks_exact(units));
            for (((f, a), da), &off) in tables.zip(d_alpha_t.chunks_exact_mut(units)).zip(offsets) {
                for j in 0..units {
                    let k = p[j] * f[j];
                    let ak = a[j] * k;
                    let diff = u[j] - off;
                    slope[j] += ak * diff;
                    bw[j] += ak * diff * diff;
                    da[j] += coef[j] * k;
                    p[j] *= step[j];
                }
            }
            let ds = &mut d_s[span];
            for j in 0..units {
                // KAF'(s) = -2γ Σ α_i κ_i (s - d_i)
                ds[j] = coef[j] * (-2.0 * gammas[j] * slope[j]) + du[j] * residual;
                d_gammas[j] -= coef[j] * bw[j];
            }
        }
    }
);

/// Applies the gate row-wise to `s` (`rows x units`), writing into `out`.
/// When `cache` is given it is refilled for a later backward pass.
pub(crate) fn gate_forward_into(
    params: &KafGateParams,
    kind: GateKind,
    s: &[f64],
    units: usize,
    out: &mut [f64],
    cache: Option<&mut GateCache>,
) {
    debug_assert_eq!(s.len(), out.len());
    let rows = s.len().checked_div(units).unwrap_or(0);
    let dict_size = params.dict_size();

    if kind == GateKind::Standard {
        sigmoid_into(s, out);
        if let Some(c) = cache {
            c.kind = kind;
            c.rows = rows;
            c.units = units;
            c.dict_size = dict_size;
            c.s.clear();
            c.start.clear();
            c.step.clear();
            c.factors.clear();
            c.slow = false;
            c.out.clear();
            c.out.extend_from_slice(out);
        }
        return;
    }

    let dict = params.dictionary();
    let layout = Layout::new(dict);
    let gammas: &[f64] = &params.gammas;
    let factors = factor_table(&layout, gammas);
    let alpha_t = transposed(&params.alphas);
    let q: Vec<f64> = gammas.iter().map(|g| (-2.0 * g * layout.delta * layout.delta).exp()).collect();

    let n = s.len();
    let mut cache = cache;
    // Reuse the cache's buffers; every entry is overwritten below.
    let (mut start, mut step) = match cache.as_deref_mut() {
        Some(c) => (std::mem::take(&mut c.start), std::mem::take(&mut c.step)),
        None => (Vec::new(), Vec::new()),
    };
    start.resize(n, 0.0);
    step.resize(n, 0.0);
    let slow = sequence_args(s, gammas, &layout, &mut start, &mut step);
    exp_in_place(&mut start);
    exp_in_place(&mut step);
    let (scale, residual) = kind.mix();
    if slow {
        for (k, x) in s.iter().enumerate() {
            if !layout.fast(x - layout.centre, gammas[k % units]) {
                start[k] = 0.0;
                step[k] = 1.0;
            }
        }
    }

    let mut z = vec![0.0; n];
    let e = Expansion { units, start: &start, step: &step, factors: &factors, alpha_t: &alpha_t };
    expansion_rows(&e, s, scale, residual, &mut z);
    if slow {
        let mut scratch = vec![0.0; dict_size];
        for (k, x) in s.iter().enumerate() {
            let j = k % units;
            if !layout.fast(x - layout.centre, gammas[j]) {
                kernel_row(*x, gammas[j], dict.elements(), layout.delta, q[j], &mut scratch);
                let kaf: f64 = scratch.iter().zip(params.alphas.row(j)).map(|(k, a)| k * a).sum();
                z[k] = scale * kaf + residual * x;
            }
        }
    }
    sigmoid_into(&z, out);
    if let Some(c) = cache.as_deref_mut() {
        c.s.clear();
        c.s.extend_from_slice(s);
        c.start = start;
        c.step = step;
        c.slow = slow;
    }
    if let Some(c) = cache {
        c.kind = kind;
        c.rows = rows;
        c.units = units;
        c.dict_size = dict_size;
        c.factors = factors;
        c.out.clear();
        c.out.extend_from_slice(out);
    }
}

/// Gate over a batch of pre-activations (`rows x units`).
pub fn gate_forward(params: &KafGateParams, kind: GateKind, s: &Matrix) -> Result<(Matrix, GateCache)> {
    check_units(params, kind, s.cols())?;
    let mut out = Matrix::zeros(s.rows(), s.cols());
    let mut cache = GateCache::empty();
    gate_forward_into(params, kind, s.as_slice(), s.cols(), out.as_mut_slice(), Some(&mut cache));
    Ok((out, cache))
}

/// Backward pass accumulating into caller-owned buffers: `d_s` is
/// overwritten, `d_alphas` and `d_gammas` are added to.
pub(crate) fn gate_backward_accumulate(
    params: &KafGateParams,
    cache: &GateCache,
    upstream: &[f64],
    d_s: &mut [f64],
    d_alphas: &mut Matrix,
    d_gammas: &mut [f64],
) {
    let units = cache.units;
    let dsize = cache.dict_size;
    if cache.kind == GateKind::Standard {
        for ((ds, up), g) in d_s.iter_mut().zip(upstream).zip(&cache.out) {
            *ds = up * g * (1.0 - g);
        }
        return;
    }
    let (scale, residual) = cache.kind.mix();

    let dict = params.dictionary();
    let layout = Layout::new(dict);
    let gammas: &[f64] = &params.gammas;
    let alpha_t = transposed(&params.alphas);
    let q: Vec<f64> = gammas.iter().map(|g| (-2.0 * g * layout.delta * layout.delta).exp()).collect();
    let mut d_alpha_t = vec![0.0; dsize * units];
    let e = Expansion { units, start: &cache.start, step: &cache.step, factors: &cache.factors, alpha_t: &alpha_t };
    let rows = GradRows {
        s: &cache.s,
        out: &cache.out,
        upstream,
        centre: layout.centre,
        offsets: &layout.offsets,
        gammas,
        d_s: &mut *d_s,
        d_alpha_t: &mut d_alpha_t,
        d_gammas: &mut *d_gammas,
    };
    expansion_grad_rows(&e, rows, scale, residual);
    if cache.slow {
        let mut scratch = vec![0.0; dsize];
        for (k, &x) in cache.s.iter().enumerate() {
            let j = k % units;
            if layout.fast(x - layout.centre, gammas[j]) {
                continue;
            }
            let g = cache.out[k];
            let coef = upstream[k] * g * (1.0 - g) * scale;
            kernel_row(x, gammas[j], dict.elements(), layout.delta, q[j], &mut scratch);
            let (mut slope, mut bw) = (0.0, 0.0);
            for (i, kv) in scratch.iter().enumerate() {
                let diff = x - dict.elements()[i];
                let ak = params.alphas[(j, i)] * kv;
                slope += ak * diff;
                bw += ak * diff * diff;
                d_alpha_t[i * units + j] += coef * kv;
            }
            d_s[k] += coef * (-2.0 * gammas[j] * slope);
            d_gammas[j] -= coef * bw;
        }
    }
    let da = d_alphas.as_mut_slice();
    for j in 0..units {
        for i in 0..dsize {
            da[j * dsize + i] += d_alpha_t[i * units + j];
        }
    }
}

/// Gradients of `Σ upstream ⊙ g` with respect to the pre-activation, the
/// mixing coefficients and the bandwidths. `Standard` gates report zero
/// parameter gradients.
pub fn gate_backward(params: &KafGateParams, cache: GateCache, upstream: &Matrix) -> Result<GateGrads> {
    if upstream.shape() != (cache.rows, cache.units) && !(cache.rows == 0 && upstream.rows() == 0) {
        return Err(Error::Usage(format!(
            "upstream gradient {}x{} does not match cached forward {}x{}",
            upstream.rows(),
            upstream.cols(),
            cache.rows,
            cache.units
        )));
    }
    if cache.kind.uses_kaf() && (params.units() != cache.units || params.dict_size() != cache.dict_size) {
        return Err(Error::Usage("cache was produced by a different gate".into()));
    }
    let mut d_s = Matrix::zeros(upstream.rows(), upstream.cols());
    let mut d_alphas = Matrix::zeros(params.units(), params.dict_size());
    let mut d_gammas = Vector::zeros(params.units());
    gate_backward_accumulate(params, &cache, upstream.as_slice(), d_s.as_mut_slice(), &mut d_alphas, &mut d_gammas);
    Ok(GateGrads { d_s, d_alphas, d_gammas })
}
