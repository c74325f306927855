//! Attention modulation over explicit region partitions.
//!
//! Three strategies share one logit matrix:
//!
//! * standard: per-key softmax over queries;
//! * hard modulation: edit-query logits forced to `+inf`, realized both as a
//!   finite surrogate `M` and as the exact limiting distribution;
//! * effects-sensitive attention (ESA): edit-query logits against object keys
//!   raised by `delta = alpha * std(S)`, and restoration-query logits against
//!   background keys raised by a second `delta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    column_softmax, compensated_sum, population_std, softmax, LogitMatrix, ProbColumn,
};

/// Query and key index sets for one attention call.
///
/// Queries split into `edit` and `aux`; `aux` splits further into `effect`
/// (shadows, reflections) and `other`. `restore` is the subset of `aux`
/// receiving the background-restoration bias. Keys carry object features,
/// background features, or neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionDesc", into = "PartitionDesc")]
pub struct RegionPartition {
    n_queries: usize,
    edit: Vec<usize>,
    aux: Vec<usize>,
    effect: Vec<usize>,
    other: Vec<usize>,
    restore: Vec<usize>,
    n_keys: usize,
    object_keys: Vec<usize>,
    background_keys: Vec<usize>,
    is_edit: Vec<bool>,
}

/// Serialized form of a [`RegionPartition`]; `aux` is derived.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionDesc {
    pub n_queries: usize,
    pub edit: Vec<usize>,
    #[serde(default)]
    pub effect: Vec<usize>,
    #[serde(default)]
    pub other: Vec<usize>,
    #[serde(default)]
    pub restore: Vec<usize>,
    pub n_keys: usize,
    pub object_keys: Vec<usize>,
    #[serde(default)]
    pub background_keys: Vec<usize>,
}

fn sorted_unique(name: &str, mut idx: Vec<usize>, bound: usize) -> Result<Vec<usize>> {
    idx.sort_unstable();
    if let Some(w) = idx.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::domain(format!("{name} lists index {} twice", w[0])));
    }
    if let Some(&last) = idx.last() {
        if last >= bound {
            return Err(Error::Range { index: last, len: bound });
        }
    }
    Ok(idx)
}

impl TryFrom<PartitionDesc> for RegionPartition {
    type Error = Error;

    fn try_from(d: PartitionDesc) -> Result<Self> {
        let n = d.n_queries;
        let edit = sorted_unique("edit", d.edit, n)?;
        let effect = sorted_unique("effect", d.effect, n)?;
        let other = sorted_unique("other", d.other, n)?;
        let restore = sorted_unique("restore", d.restore, n)?;
        let object_keys = sorted_unique("object_keys", d.object_keys, d.n_keys)?;
        let background_keys = sorted_unique("background_keys", d.background_keys, d.n_keys)?;

        if edit.is_empty() {
            return Err(Error::domain("edit region is empty"));
        }
        if d.n_keys == 0 {
            return Err(Error::domain("partition has no keys"));
        }
        let mut owner = vec![0u8; n];
        for (tag, set) in [(1u8, &edit), (2, &effect), (3, &other)] {
            for &i in set {
                if owner[i] != 0 {
                    return Err(Error::domain(format!(
                        "query {i} belongs to more than one of edit/effect/other"
                    )));
                }
                owner[i] = tag;
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == 0) {
            return Err(Error::domain(format!(
                "query {i} is in neither the edit nor the auxiliary region"
            )));
        }
        if let Some(&i) = restore.iter().find(|&&i| owner[i] == 1) {
            return Err(Error::domain(format!("restoration query {i} lies in the edit region")));
        }
        if let Some(k) = object_keys.iter().find(|k| background_keys.binary_search(k).is_ok()) {
            return Err(Error::domain(format!("key {k} is both an object and a background key")));
        }

        let aux = (0..n).filter(|&i| owner[i] != 1).collect();
        let is_edit = owner.iter().map(|&o| o == 1).collect();
        Ok(Self {
            n_queries: n,
            edit,
            aux,
            effect,
            other,
            restore,
            n_keys: d.n_keys,
            object_keys,
            background_keys,
            is_edit,
        })
    }
}

impl From<RegionPartition> for PartitionDesc {
    fn from(p: RegionPartition) -> Self {
        PartitionDesc {
            n_queries: p.n_queries,
            edit: p.edit,
            effect: p.effect,
            other: p.other,
            restore: p.restore,
            n_keys: p.n_keys,
            object_keys: p.object_keys,
            background_keys: p.background_keys,
        }
    }
}

impl RegionPartition {
    pub fn new(desc: PartitionDesc) -> Result<Self> {
        desc.try_into()
    }

    /// Edit queries first, then effect, then other; every key is an object key.
    pub fn contiguous(n_edit: usize, n_effect: usize, n_other: usize, n_keys: usize) -> Result<Self> {
        let n = n_edit + n_effect + n_other;
        Self::new(PartitionDesc {
            n_queries: n,
            edit: (0..n_edit).collect(),
            effect: (n_edit..n_edit + n_effect).collect(),
            other: (n_edit + n_effect..n).collect(),
            restore: Vec::new(),
            n_keys,
            object_keys: (0..n_keys).collect(),
            background_keys: Vec::new(),
        })
    }

    /// Replaces the key roles and the restoration query set.
    pub fn with_keys(
        self,
        object_keys: Vec<usize>,
        background_keys: Vec<usize>,
        restore: Vec<usize>,
    ) -> Result<Self> {
        let mut d = PartitionDesc::from(self);
        d.object_keys = object_keys;
        d.background_keys = background_keys;
        d.restore = restore;
        Self::new(d)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn edit(&self) -> &[usize] {
        &self.edit
    }

    pub fn aux(&self) -> &[usize] {
        &self.aux
    }

    pub fn effect(&self) -> &[usize] {
        &self.effect
    }

    pub fn other(&self) -> &[usize] {
        &self.other
    }

    pub fn restore(&self) -> &[usize] {
        &self.restore
    }

    pub fn object_keys(&self) -> &[usize] {
        &self.object_keys
    }

    pub fn background_keys(&self) -> &[usize] {
        &self.background_keys
    }

    pub fn is_edit(&self, i: usize) -> bool {
        self.is_edit[i]
    }

    /// Edit and effect queries: the region ideal attention must favour.
    pub fn critical(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.edit.iter().chain(&self.effect).copied().collect();
        c.sort_unstable();
        c
    }

    pub fn check_logits(&self, logits: &LogitMatrix) -> Result<()> {
        if logits.rows() != self.n_queries || logits.cols() != self.n_keys {
            return Err(Error::shape(format!(
                "partition expects {}x{} logits, got {}x{}",
                self.n_queries,
                self.n_keys,
                logits.rows(),
                logits.cols()
            )));
        }
        Ok(())
    }
}

/// Which logits feed the standard deviation behind `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdScope {
    /// One `delta` from every entry of `S`.
    #[default]
    AllEntries,
    /// A separate `delta` per key column.
    PerColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsaConfig {
    pub alpha_insert: f64,
    pub alpha_restore: f64,
    pub std_scope: StdScope,
}

impl Default for EsaConfig {
    /// Insertion 0.1, restoration 1.0.
    fn default() -> Self {
        Self { alpha_insert: 0.1, alpha_restore: 1.0, std_scope: StdScope::AllEntries }
    }
}

impl EsaConfig {
    pub fn new(alpha_insert: f64, alpha_restore: f64, std_scope: StdScope) -> Result<Self> {
        let c = Self { alpha_insert, alpha_restore, std_scope };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_insert", self.alpha_insert), ("alpha_restore", self.alpha_restore)] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::domain(format!("{name} must be a nonnegative real, got {a}")));
            }
        }
        Ok(())
    }
}

/// Column-stochastic attention: one distribution over queries per key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMap {
    n_queries: usize,
    columns: Vec<ProbColumn>,
}

impl AttentionMap {
    pub fn from_columns(columns: Vec<ProbColumn>) -> Result<Self> {
        let n_queries = columns.first().map(ProbColumn::len).ok_or_else(|| {
            Error::shape("attention map needs at least one column")
        })?;
        if columns.iter().any(|c| c.len() != n_queries) {
            return Err(Error::shape("attention columns differ in length"));
        }
        Ok(Self { n_queries, columns })
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> Result<&ProbColumn> {
        self.columns.get(j).ok_or(Error::Range { index: j, len: self.columns.len() })
    }

    pub fn columns(&self) -> &[ProbColumn] {
        &self.columns
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns[j][i]
    }

    /// Smallest entry over the whole map.
    pub fn min_entry(&self) -> f64 {
        self.columns
            .iter()
            .flat_map(|c| c.as_slice().iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

fn softmax_columns(logits: &LogitMatrix) -> Result<AttentionMap> {
    let cols = (0..logits.cols())
        .map(|j| column_softmax(logits, j))
        .collect::<Result<Vec<_>>>()?;
    AttentionMap::from_columns(cols)
}

/// `S_ij = q_i . k_j / sqrt(d)`.
pub fn build_logits(queries: &[Vec<f64>], keys: &[Vec<f64>]) -> Result<LogitMatrix> {
    let d = queries.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::shape("queries must be nonempty with dimension >= 1"));
    }
    if keys.is_empty() {
        return Err(Error::shape("no keys"));
    }
    if queries.iter().chain(keys).any(|v| v.len() != d) {
        return Err(Error::shape(format!("all query and key vectors must have dimension {d}")));
    }
    let scale = (d as f64).sqrt();
    let mut values = Vec::with_capacity(queries.len() * keys.len());
    for q in queries {
        for k in keys {
            let dot = compensated_sum(q.iter().zip(k).map(|(a, b)| a * b));
            values.push(dot / scale);
        }
    }
    LogitMatrix::new(queries.len(), keys.len(), values)
}

/// `delta = alpha * std(S)` over every entry of `S`.
pub fn compute_delta(logits: &LogitMatrix, alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::domain(format!("alpha must be a nonnegative real, got {alpha}")));
    }
    Ok(alpha * population_std(logits.values())?)
}

/// Per-column `delta` values under the given scope.
pub fn column_deltas(logits: &LogitMatrix, alpha: f64, scope: StdScope) -> Result<Vec<f64>> {
    match scope {
        StdScope::AllEntries => Ok(vec![compute_delta(logits, alpha)?; logits.cols()]),
        StdScope::PerColumn => {
            if !(alpha.is_finite() && alpha >= 0.0) {
                return Err(Error::domain(format!("alpha must be a nonnegative real, got {alpha}")));
            }
            (0..logits.cols())
                .map(|j| Ok(alpha * population_std(&logits.column(j)?)?))
                .collect()
        }
    }
}

/// The additive bias ESA places on each logit.
#[derive(Debug, Clone, PartialEq)]
pub struct EsaBias {
    /// `delta_1` per key column; zero for keys that are not object keys.
    pub insert: Vec<f64>,
    /// `delta_2` per key column; zero for keys that are not background keys.
    pub restore: Vec<f64>,
}

impl EsaBias {
    pub fn compute(logits: &LogitMatrix, partition: &RegionPartition, config: &EsaConfig) -> Result<Self> {
        partition.check_logits(logits)?;
        config.validate()?;
        let d1 = column_deltas(logits, config.alpha_insert, config.std_scope)?;
        let d2 = column_deltas(logits, config.alpha_restore, config.std_scope)?;
        let mut insert = vec![0.0; logits.cols()];
        let mut restore = vec![0.0; logits.cols()];
        for &j in partition.object_keys() {
            insert[j] = d1[j];
        }
        for &j in partition.background_keys() {
            restore[j] = d2[j];
        }
        Ok(Self { insert, restore })
    }

    /// Bias on logit `(i, j)`.
    pub fn at(&self, partition: &RegionPartition, i: usize, j: usize) -> f64 {
        if partition.is_edit(i) {
            self.insert[j]
        } else if partition.restore().binary_search(&i).is_ok() {
            self.restore[j]
        } else {
            0.0
        }
    }

    /// Bias column for key `j`, indexed by query.
    pub fn column(&self, partition: &RegionPartition, j: usize) -> Vec<f64> {
        (0..partition.n_queries()).map(|i| self.at(partition, i, j)).collect()
    }
}

/// Logits after the ESA bias, together with the bias that was applied.
pub fn esa_logits(
    logits: &LogitMatrix,
    partition: &RegionPartition,
    config: &EsaConfig,
) -> Result<(LogitMatrix, EsaBias)> {
    let bias = EsaBias::compute(logits, partition, config)?;
    let biased = logits.map_entries(|i, j, s| s + bias.at(partition, i, j))?;
    Ok((biased, bias))
}

pub fn standard_attention(logits: &LogitMatrix) -> Result<AttentionMap> {
    softmax_columns(logits)
}

pub fn esa_attention(
    logits: &LogitMatrix,
    partition: &RegionPartition,
    config: &EsaConfig,
) -> Result<AttentionMap> {
    let (biased, _) = esa_logits(logits, partition, config)?;
    softmax_columns(&biased)
}

/// Softmax of one logit column plus a fixed bias vector.
pub fn biased_column(logits: &[f64], bias: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = logits.iter().zip(bias).map(|(s, b)| s + b).collect();
    softmax(&shifted)
}

/// Hard modulation with `+inf` replaced by the finite logit `m`.
pub fn hard_attention_surrogate(
    logits: &LogitMatrix,
    partition: &RegionPartition,
    m: f64,
) -> Result<AttentionMap> {
    partition.check_logits(logits)?;
    if !m.is_finite() {
        return Err(Error::domain("surrogate logit M must be finite"));
    }
    if m < logits.max() {
        return Err(Error::domain(format!(
            "surrogate logit M = {m} is below the largest logit {}",
            logits.max()
        )));
    }
    let replaced = logits.map_entries(|i, _, s| if partition.is_edit(i) { m } else { s })?;
    softmax_columns(&replaced)
}

/// The `M -> inf` limit of hard modulation: uniform over edit queries and
/// zero on auxiliary queries, identical for every key.
#[derive(Debug, Clone, PartialEq)]
pub struct HardLimitForm {
    partition: RegionPartition,
}

impl HardLimitForm {
    pub fn partition(&self) -> &RegionPartition {
        &self.partition
    }

    pub fn column(&self) -> ProbColumn {
        let w = 1.0 / self.partition.edit().len() as f64;
        let mass = (0..self.partition.n_queries())
            .map(|i| if self.partition.is_edit(i) { w } else { 0.0 })
            .collect();
        ProbColumn::new(mass).expect("uniform edit column is a distribution")
    }

    pub fn to_map(&self) -> AttentionMap {
        let c = self.column();
        AttentionMap::from_columns(vec![c; self.partition.n_keys()])
            .expect("partition has at least one key")
    }
}

pub fn hard_attention_limit(partition: &RegionPartition) -> Result<HardLimitForm> {
    if partition.edit().is_empty() {
        return Err(Error::domain("hard modulation limit needs a nonempty edit region"));
    }
    Ok(HardLimitForm { partition: partition.clone() })
}
