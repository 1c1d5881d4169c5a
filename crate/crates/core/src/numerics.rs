//! Deterministic numerical primitives: dense matrices, stable softmax and a
//! seeded, splittable random generator.
//!
//! # Random streams
//!
//! [`Rng`] wraps ChaCha8 (`rand_chacha`). A generator is identified by a
//! `(seed, stream)` pair: the seed selects the ChaCha key and the stream selects
//! the 64-bit ChaCha nonce. Streams with the same key never overlap, so
//! sub-tasks obtain independent generators through [`Rng::fork`] without
//! coordinating. The byte stream is fixed by the ChaCha algorithm and is the
//! same on every platform.

use std::ops::{Index, IndexMut};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                expected: format!("rows of length {cols}"),
                got: "ragged rows".into(),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// `self · v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    /// Inverse together with the 2-norm condition number.
    ///
    /// Fails with [`Error::SingularMatrix`] when the condition number is at or above
    /// `max_condition`.
    pub fn inverse(&self, max_condition: f64) -> Result<(Matrix, f64)> {
        if self.rows != self.cols {
            return Err(Error::Shape {
                expected: "square matrix".into(),
                got: format!("{}x{}", self.rows, self.cols),
            });
        }
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        let sv = m.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition < max_condition) {
            return Err(Error::SingularMatrix { condition });
        }
        let inv = m.try_inverse().ok_or(Error::SingularMatrix { condition })?;
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                data.push(inv[(r, c)]);
            }
        }
        Ok((
            Matrix {
                rows: self.rows,
                cols: self.cols,
                data,
            },
            condition,
        ))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Tolerance on the sum of a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A discrete distribution over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(format!(
                "probability entries must lie in [0,1]: {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self(values))
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self(v)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Convex combination `lambda·a + (1−lambda)·b`.
    pub fn mix(a: &ProbVector, b: &ProbVector, lambda: f64) -> Self {
        Self(
            a.0.iter()
                .zip(&b.0)
                .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput(format!("softmax input must be finite: {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(ProbVector(out))
}

/// Splittable, seeded generator. See the module docs for the stream layout.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    forks: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            forks: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-task. Does not advance `self`.
    pub fn fork(&self, label: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(label.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    /// Independent generator for the next anonymous sub-task.
    pub fn split(&mut self) -> Rng {
        self.forks += 1;
        self.fork(u64::MAX - self.forks)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[low, high)`.
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        use rand_distr::Distribution;
        rand_distr::StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// Draws `j` with probability `p[j]`, consuming exactly one uniform draw.
pub fn sample_categorical(p: &ProbVector, rng: &mut Rng) -> usize {
    sample_categorical_slice(p.as_slice(), rng)
}

pub(crate) fn sample_categorical_slice(p: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &pj) in p.iter().enumerate() {
        if pj > 0.0 {
            last_positive = j;
        }
        acc += pj;
        if u < acc {
            return j;
        }
    }
    // rounding left u above the cumulative sum
    last_positive
}

/// Symmetric `Beta(alpha, alpha)` sample via Jöhnk's algorithm, evaluated in log
/// space so that small `alpha` does not underflow.
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "beta shape must be positive, got {alpha}"
        )));
    }
    loop {
        let u = rng.uniform();
        let v = rng.uniform();
        if u == 0.0 || v == 0.0 {
            continue;
        }
        let lx = u.ln() / alpha;
        let ly = v.ln() / alpha;
        let m = lx.max(ly);
        let lsum = m + ((lx - m).exp() + (ly - m).exp()).ln();
        if lsum <= 0.0 {
            // x / (x + y)
            return Ok((lx - lsum).exp().clamp(0.0, 1.0));
        }
    }
}
