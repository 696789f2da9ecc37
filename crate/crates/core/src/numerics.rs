//! Dense linear algebra and scalar helpers shared by every other module.
//!
//! Matrices are row-major `f64`. Products go through a blocked GEMM kernel;
//! the naive triple loop is kept only in tests as an oracle.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite entry at flat index {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry, 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect::<Vec<_>>()
            .into())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Owned real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Whether a GEMM operand is used as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `c ← alpha·op(a)·op(b) + beta·c` on raw row-major buffers.
///
/// `a` is `a_rows x a_cols` as stored; `op(a)` must be `m x k` and `op(b)`
/// `k x n`, with `c` an `m x n` buffer whose rows are `ldc` apart.
#[allow(clippy::too_many_arguments)]
pub fn gemm_raw(
    alpha: f64,
    a: &[f64],
    a_shape: (usize, usize),
    op_a: Op,
    b: &[f64],
    b_shape: (usize, usize),
    op_b: Op,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    let (m, k) = match op_a {
        Op::N => a_shape,
        Op::T => (a_shape.1, a_shape.0),
    };
    let (kb, n) = match op_b {
        Op::N => b_shape,
        Op::T => (b_shape.1, b_shape.0),
    };
    assert_eq!(k, kb, "inner dimensions differ");
    assert!(a.len() >= a_shape.0 * a_shape.1);
    assert!(b.len() >= b_shape.0 * b_shape.1);
    assert!(ldc >= n);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n);
    if k == 0 {
        for r in 0..m {
            for v in &mut c[r * ldc..r * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (a_shape.1 as isize, 1),
        Op::T => (1, a_shape.1 as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (b_shape.1 as isize, 1),
        Op::T => (1, b_shape.1 as isize),
    };
    // SAFETY: extents were checked above; strides describe views that stay
    // inside each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// `c ← op(a)·op(b) + beta·c` on matrices.
pub fn gemm_into(a: &Matrix, op_a: Op, b: &Matrix, op_b: Op, beta: f64, c: &mut Matrix) -> Result<()> {
    let (m, k) = match op_a {
        Op::N => a.shape(),
        Op::T => (a.cols, a.rows),
    };
    let (kb, n) = match op_b {
        Op::N => b.shape(),
        Op::T => (b.cols, b.rows),
    };
    if k != kb || c.shape() != (m, n) {
        return Err(Error::Shape(format!(
            "cannot form {m}x{k} by {kb}x{n} into {}x{}",
            c.rows, c.cols
        )));
    }
    gemm_raw(1.0, &a.data, a.shape(), op_a, &b.data, b.shape(), op_b, beta, &mut c.data, n);
    Ok(())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_into(a, Op::N, b, Op::N, 0.0, &mut c)?;
    Ok(c)
}

/// Logistic function, stable for arbitrarily large `|s|`.
#[inline]
pub fn sigmoid(s: f64) -> f64 {
    let mut out = [0.0];
    sigmoid_into(&[s], &mut out);
    out[0]
}

/// Runs a function body through a copy compiled for AVX2/FMA when the CPU
/// has it. Rust never fuses multiply-adds on its own, so both copies round
/// identically.
macro_rules! dispatch {
    ($(#[$meta:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$meta])*
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn body($($arg: $ty),*) $(-> $ret)? $body

            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide_body($($arg: $ty),*) $(-> $ret)? {
                    body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: the features were detected at runtime.
                    return unsafe { wide_body($($arg),*) };
                }
            }
            body($($arg),*)
        }
    };
}
pub(crate) use dispatch;

// Beyond this the kernel below would leave the normal range of 2^k.
const EXP_CORE_LIMIT: f64 = 708.0;

/// `exp` for `|x| <= 708` using only arithmetic that auto-vectorizes:
/// `x = k ln2 + r` with `|r| <= ln2/2`, a degree-13 Taylor polynomial for
/// `e^r` and `2^k` assembled from its bits. Within 2 ulp of `f64::exp`.
#[inline(always)]
#[allow(clippy::excessive_precision)]
fn exp_core(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    const INV_FACT: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
        1.0 / 6227020800.0,
    ];
    let x = x.clamp(-EXP_CORE_LIMIT, EXP_CORE_LIMIT);
    let t = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = t - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = INV_FACT[13];
    for c in INV_FACT[..13].iter().rev() {
        p = p * r + c;
    }
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    p * scale
}

fn in_core_range(xs: &[f64]) -> bool {
    xs.iter().fold(true, |ok, x| ok & (x.abs() <= EXP_CORE_LIMIT))
}

dispatch!(
    /// `exp` over a slice, in place. Agrees with `f64::exp` to 2 ulp.
    pub fn exp_in_place(xs: &mut [f64]) {
        if in_core_range(xs) {
            for x in xs.iter_mut() {
                *x = exp_core(*x);
            }
        } else {
            for x in xs.iter_mut() {
                *x = if x.abs() <= EXP_CORE_LIMIT { exp_core(*x) } else { x.exp() };
            }
        }
    }
);

dispatch!(
    /// Element-wise [`sigmoid`].
    pub fn sigmoid_into(xs: &[f64], out: &mut [f64]) {
        if in_core_range(xs) {
            for (o, &x) in out.iter_mut().zip(xs) {
                let e = exp_core(-x.abs());
                let d = 1.0 + e;
                *o = if x >= 0.0 { 1.0 / d } else { e / d };
            }
        } else {
            for (o, &x) in out.iter_mut().zip(xs) {
                *o = sigmoid_slow(x);
            }
        }
    }
);

fn sigmoid_slow(s: f64) -> f64 {
    if s.abs() <= EXP_CORE_LIMIT {
        let e = exp_core(-s.abs());
        let d = 1.0 + e;
        if s >= 0.0 { 1.0 / d } else { e / d }
    } else if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh(s: f64) -> f64 {
    s.tanh()
}

/// Softmax via max subtraction.
pub fn softmax(v: &[f64]) -> Vector {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out.into()
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v_i)`, computed stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Solves `k·x = rhs` for symmetric positive-definite `k` by Cholesky.
pub fn solve_spd(k: &Matrix, rhs: &[f64]) -> Result<Vector> {
    let n = k.rows;
    if k.cols != n {
        return Err(Error::Shape(format!("{}x{} is not square", k.rows, k.cols)));
    }
    if rhs.len() != n {
        return Err(Error::Shape(format!("rhs length {} for {n}x{n} system", rhs.len())));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (k[(i, j)], k[(j, i)]);
            if (a - b).abs() > 1e-10 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::Numerical(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }

    // Lower factor, row-major.
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = k[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Numerical(format!(
                "Cholesky factorization failed at pivot {j}: matrix is not positive definite"
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = k[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / d;
        }
    }

    let mut y = rhs.to_vec();
    for i in 0..n {
        for p in 0..i {
            y[i] -= l[(i, p)] * y[p];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for p in i + 1..n {
            y[i] -= l[(p, i)] * y[p];
        }
        y[i] /= l[(i, i)];
    }
    Ok(y.into())
}

/// Seeded generator with independent, reproducible streams.
///
/// Backed by ChaCha8 so draw sequences do not depend on the platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator on a separate stream of the same seed; different `stream`
    /// values never overlap.
    pub fn split(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        // Rejection sampling removes modulo bias.
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
