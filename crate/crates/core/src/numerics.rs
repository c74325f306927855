//! Dense primitives shared by the attention and certification code:
//! a logit matrix, probability columns, compensated summation, a stable
//! per-column softmax, population standard deviation and KL divergence.
//!
//! Softmax normalizes over queries (rows) for each key (column), so every
//! column of an attention map is a distribution over query tokens.

use std::fmt;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a [`ProbColumn`].
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Neumaier-compensated sum. Keeps the rounding error independent of the
/// number of terms, which matters once columns reach ~10^6 tokens.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Pre-softmax scores, `rows` query tokens by `cols` key tokens, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct LogitMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "logit matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} logit matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "logit ({}, {}) is not finite",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != m) {
            return Err(Error::shape(format!(
                "row {bad} has {} entries, expected {m}",
                rows[bad].len()
            )));
        }
        Self::new(n, m, rows.into_iter().flatten().collect())
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// All entries in row-major order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.cols {
            return Err(Error::Range { index: j, len: self.cols });
        }
        Ok((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    /// Returns a copy with `f(i, j, s)` applied to every entry.
    pub fn map_entries(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &s)| f(k / self.cols, k % self.cols, s))
            .collect();
        Self::new(self.rows, self.cols, values)
    }
}

impl TryFrom<Vec<Vec<f64>>> for LogitMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<LogitMatrix> for Vec<Vec<f64>> {
    fn from(m: LogitMatrix) -> Self {
        m.to_rows()
    }
}

/// A distribution over query tokens: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbColumn(Vec<f64>);

impl ProbColumn {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::shape("probability column is empty"));
        }
        if let Some((i, p)) = mass
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::domain(format!("mass {p} at index {i} outside [0, 1]")));
        }
        let total = compensated_sum(mass.iter().copied());
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::domain(format!("column mass sums to {total}, not 1")));
        }
        Ok(Self(mass))
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

    /// Total mass on the given indices.
    pub fn mass_on(&self, indices: &[usize]) -> f64 {
        compensated_sum(indices.iter().map(|&i| self.0[i]))
    }
}

impl std::ops::Index<usize> for ProbColumn {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Result of a KL divergence: finite, or the distinguished infinity that
/// arises when the reference has mass where the other distribution has none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    Finite(f64),
    Infinite,
}

impl Divergence {
    pub fn is_infinite(self) -> bool {
        matches!(self, Divergence::Infinite)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Divergence::Finite(v) => Some(v),
            Divergence::Infinite => None,
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Divergence::Finite(v) => write!(f, "{v}"),
            Divergence::Infinite => f.write_str("inf"),
        }
    }
}

// JSON has no infinity literal; the sentinel is written as the string "inf".
impl Serialize for Divergence {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Divergence::Finite(v) => s.serialize_f64(*v),
            Divergence::Infinite => s.serialize_str("inf"),
        }
    }
}

/// Numerically stable softmax of a slice: `exp(x - max) / sum`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z = compensated_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / z).collect()
}

/// Softmax of column `j` over the query axis.
pub fn column_softmax(logits: &LogitMatrix, j: usize) -> Result<ProbColumn> {
    let col = logits.column(j)?;
    ProbColumn::new(softmax(&col))
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("mean of an empty sample"));
    }
    Ok(compensated_sum(values.iter().copied()) / values.len() as f64)
}

/// Population (divide-by-N) standard deviation.
pub fn population_std(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("standard deviation of an empty sample"));
    }
    let mu = mean(values)?;
    let ss = compensated_sum(values.iter().map(|&x| (x - mu) * (x - mu)));
    Ok((ss / values.len() as f64).sqrt())
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln(0/q) = 0`; any `p_i > 0` facing
/// `q_i = 0` yields [`Divergence::Infinite`].
pub fn kl_divergence(p: &ProbColumn, q: &ProbColumn) -> Result<Divergence> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "KL divergence between columns of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut terms = Vec::with_capacity(p.len());
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(Divergence::Infinite);
        }
        terms.push(pi * (pi / qi).ln());
    }
    Ok(Divergence::Finite(compensated_sum(terms)))
}
