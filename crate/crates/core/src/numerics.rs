//! Dense linear algebra, activations, seeded randomness and the
//! finite-difference gradient checker.
//!
//! Everything is `f64`. Central differences lose too many digits in `f32`
//! for the gradient checker to be meaningful.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Fills the matrix with independent draws from `uniform(-limit, limit)`.
    pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut SeededRng) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in &mut m.data {
            *v = rng.uniform_range(-limit, limit);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a × b`, accumulated in i-k-j order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul overflowed".into()));
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function. Branches on the sign of `x` so `exp` never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Softmax restricted to positions where `mask` is true.
///
/// Masked-out positions are never exponentiated and come back as exact
/// zeros. The maximum over the unmasked scores is subtracted first.
pub fn softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} mask entries",
            scores.len(),
            mask.len()
        )));
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyBehaviorSequence);
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax score".into()));
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    Ok(out)
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against central differences of `loss_fn` at `params`.
///
/// Per coordinate the error is `|a - n| / max(1e-8, |a| + |n|)`; the
/// maximum over all coordinates is reported.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters vs {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    for i in 0..params.len() {
        let original = probe[i];
        probe[i] = original + eps;
        let plus = loss_fn(&probe)?;
        probe[i] = original - eps;
        let minus = loss_fn(&probe)?;
        probe[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Reproducible random source.
///
/// Backed by ChaCha8 seeded from a single `u64`, which yields the same
/// stream on every platform. Floats take the top 53 bits of a `u64` draw.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-task, derived from the seed only.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
