//! In-memory and on-disk representation of model predictions.
//!
//! On disk a pool is a `pool.json` manifest next to raw blobs:
//! logits are little-endian `f32`, row-major (example-major), and labels
//! are little-endian `u32`. Blobs whose path ends in `.csv` are read as
//! decimal text instead (one row per example), for small hand-written
//! fixtures.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::confidence::argmax;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "pool.json";
pub const LABELS_FILE: &str = "labels.u32";

/// Largest `N * C` accepted from a CSV blob.
pub const CSV_MAX_VALUES: usize = 1_000_000;

/// Logits of one model over a labeled evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_id: String,
    /// Architecture family; replicates of one architecture share it.
    pub model_type: String,
    logits: Vec<f32>,
    num_classes: usize,
    /// Average inference cost per example, in arbitrary positive units.
    pub cost: f64,
    /// Input resolution tag, used by self-cascades.
    pub resolution: Option<u32>,
    pub replicate_index: u32,
}

impl PredictionSet {
    /// Builds a prediction set from row-major `N x num_classes` logits.
    pub fn new(
        model_id: impl Into<String>,
        model_type: impl Into<String>,
        logits: Vec<f32>,
        num_classes: usize,
        cost: f64,
    ) -> Result<Self> {
        let model_id = model_id.into();
        if num_classes == 0 || logits.is_empty() || !logits.len().is_multiple_of(num_classes) {
            return Err(Error::DimensionMismatch {
                entry: model_id,
                expected: (logits.len() / num_classes.max(1)).max(1) * num_classes.max(1),
                actual: logits.len(),
            });
        }
        check_cost(&model_id, cost)?;
        check_finite(&model_id, &logits, num_classes)?;
        Ok(PredictionSet {
            model_id,
            model_type: model_type.into(),
            logits,
            num_classes,
            cost,
            resolution: None,
            replicate_index: 0,
        })
    }

    pub fn with_resolution(mut self, resolution: u32) -> Self {
        self.resolution = Some(resolution);
        self
    }

    pub fn with_replicate(mut self, replicate_index: u32) -> Self {
        self.replicate_index = replicate_index;
        self
    }

    pub fn num_examples(&self) -> usize {
        self.logits.len() / self.num_classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn row(&self, example: usize) -> &[f32] {
        &self.logits[example * self.num_classes..(example + 1) * self.num_classes]
    }

    /// Top-1 class per example (ties to the lowest class index).
    pub fn predictions(&self) -> Vec<u32> {
        self.logits
            .chunks_exact(self.num_classes)
            .map(|row| argmax(row) as u32)
            .collect()
    }

    pub fn accuracy(&self, labels: &LabeledDataset) -> f64 {
        let correct = self
            .predictions()
            .iter()
            .zip(&labels.labels)
            .filter(|(p, l)| p == l)
            .count();
        correct as f64 / labels.len() as f64
    }

    fn select_rows(&self, indices: &[usize]) -> PredictionSet {
        let mut logits = Vec::with_capacity(indices.len() * self.num_classes);
        for &i in indices {
            logits.extend_from_slice(self.row(i));
        }
        PredictionSet {
            logits,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> PredictionSet {
        PredictionSet {
            model_id: self.model_id.clone(),
            model_type: self.model_type.clone(),
            logits: Vec::new(),
            num_classes: self.num_classes,
            cost: self.cost,
            resolution: self.resolution,
            replicate_index: self.replicate_index,
        }
    }
}

fn check_cost(entry: &str, cost: f64) -> Result<()> {
    if cost.is_finite() && cost > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidCost {
            entry: entry.to_string(),
            cost,
        })
    }
}

pub(crate) fn check_finite(entry: &str, values: &[f32], row_len: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(pos) => Err(Error::NonFinite {
            entry: entry.to_string(),
            example: pos / row_len,
            class: pos % row_len,
        }),
    }
}

/// Ground-truth labels of the evaluation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub labels: Vec<u32>,
    /// Free-form tag, e.g. `"threshold-selection"` or `"evaluation"`.
    pub split_tag: String,
}

impl LabeledDataset {
    pub fn new(labels: Vec<u32>) -> Self {
        LabeledDataset {
            labels,
            split_tag: "evaluation".to_string(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.split_tag = tag.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A validated set of prediction sets sharing one label set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPool {
    entries: Vec<PredictionSet>,
    labels: LabeledDataset,
}

impl ModelPool {
    /// Validates and builds a pool: shared shapes, labels in range, unique
    /// ids and unique `(model_type, resolution, replicate_index)` triples.
    /// Resolution is part of the key so one network evaluated at two input
    /// sizes can live in the same pool.
    pub fn new(entries: Vec<PredictionSet>, labels: LabeledDataset) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyPool)?;
        if labels.is_empty() {
            return Err(Error::invalid("label set is empty"));
        }
        let num_classes = first.num_classes;
        let n = labels.len();
        let mut ids = HashSet::new();
        let mut replicates = HashSet::new();
        for e in &entries {
            if e.num_classes != num_classes {
                return Err(Error::DimensionMismatch {
                    entry: e.model_id.clone(),
                    expected: n * num_classes,
                    actual: e.logits.len(),
                });
            }
            if e.num_examples() != n {
                return Err(Error::DimensionMismatch {
                    entry: e.model_id.clone(),
                    expected: n * num_classes,
                    actual: e.logits.len(),
                });
            }
            check_cost(&e.model_id, e.cost)?;
            if !ids.insert(e.model_id.as_str()) {
                return Err(Error::DuplicateModelId(e.model_id.clone()));
            }
            if !replicates.insert((e.model_type.as_str(), e.resolution, e.replicate_index)) {
                return Err(Error::DuplicateReplicate {
                    model_type: e.model_type.clone(),
                    replicate_index: e.replicate_index,
                });
            }
        }
        check_labels(&labels.labels, num_classes)?;
        Ok(ModelPool { entries, labels })
    }

    pub fn entries(&self) -> &[PredictionSet] {
        &self.entries
    }

    pub fn labels(&self) -> &LabeledDataset {
        &self.labels
    }

    pub fn num_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.entries[0].num_classes
    }

    pub fn index_of(&self, model_id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.model_id == model_id)
            .ok_or_else(|| Error::UnknownModel(model_id.to_string()))
    }

    pub fn entry(&self, model_id: &str) -> Result<&PredictionSet> {
        Ok(&self.entries[self.index_of(model_id)?])
    }

    /// Pool restricted to the given examples, in the given order.
    pub fn select_examples(&self, indices: &[usize]) -> ModelPool {
        ModelPool {
            entries: self
                .entries
                .iter()
                .map(|e| e.select_rows(indices))
                .collect(),
            labels: LabeledDataset {
                labels: indices.iter().map(|&i| self.labels.labels[i]).collect(),
                split_tag: self.labels.split_tag.clone(),
            },
        }
    }
}

pub(crate) fn check_labels(labels: &[u32], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l as usize >= num_classes) {
        None => Ok(()),
        Some(example) => Err(Error::LabelOutOfRange {
            example,
            label: labels[example],
            num_classes,
        }),
    }
}

/// Serialized form of `pool.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub version: u32,
    pub num_examples: usize,
    pub num_classes: usize,
    pub labels: String,
    pub entries: Vec<ManifestEntry>,
    /// Label value of unlabeled pixels; dense pools only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ignore_label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model_id: String,
    pub model_type: String,
    pub cost: f64,
    pub resolution: Option<u32>,
    #[serde(default)]
    pub replicate_index: u32,
    pub logits: String,
    /// `[H, W]` for dense entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 2]>,
}

impl PoolManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: PoolManifest =
            serde_json::from_str(&text).map_err(|source| Error::Manifest {
                path: path.to_path_buf(),
                source,
            })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(manifest.version));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Resolves a manifest argument that may be either the manifest file or
/// the directory containing `pool.json`.
pub fn manifest_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads exactly `expected` `f32` values (binary or CSV) for `entry`.
pub(crate) fn read_f32_values(path: &Path, expected: usize, entry: &str) -> Result<Vec<f32>> {
    if is_csv(path) {
        if expected > CSV_MAX_VALUES {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                message: format!("CSV blobs are limited to {CSV_MAX_VALUES} values"),
            });
        }
        let values = read_csv_values(path, |s| s.parse::<f32>().ok())?;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                entry: entry.to_string(),
                expected,
                actual: values.len(),
            });
        }
        return Ok(values);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::DimensionMismatch {
            entry: entry.to_string(),
            expected,
            actual: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub(crate) fn read_u32_values(path: &Path, expected: usize) -> Result<Vec<u32>> {
    let entry = "labels";
    if is_csv(path) {
        let values = read_csv_values(path, |s| s.parse::<u32>().ok())?;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                entry: entry.to_string(),
                expected,
                actual: values.len(),
            });
        }
        return Ok(values);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::DimensionMismatch {
            entry: entry.to_string(),
            expected,
            actual: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn read_csv_values<T>(path: &Path, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        for (col, field) in record.iter().enumerate() {
            let v = parse(field).ok_or_else(|| Error::Csv {
                path: path.to_path_buf(),
                message: format!("row {row}, column {col}: cannot parse `{field}`"),
            })?;
            values.push(v);
        }
    }
    Ok(values)
}

pub(crate) fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_u32_blob(path: &Path, values: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// File name for an entry's blob: position prefix plus a filesystem-safe id.
pub(crate) fn blob_name(index: usize, model_id: &str) -> String {
    let safe: String = model_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:03}-{safe}.f32")
}

/// Loads and fully validates a pool from a manifest file (or a directory
/// holding `pool.json`).
pub fn load_pool(manifest_path: impl AsRef<Path>) -> Result<ModelPool> {
    let path = manifest_file(manifest_path.as_ref());
    let manifest = PoolManifest::read(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let (n, c) = (manifest.num_examples, manifest.num_classes);
    if n == 0 || c == 0 {
        return Err(Error::invalid(format!(
            "{}: num_examples and num_classes must be positive",
            path.display()
        )));
    }
    let labels = read_u32_values(&base.join(&manifest.labels), n)?;
    check_labels(&labels, c)?;

    let mut entries = Vec::with_capacity(manifest.entries.len());
    for rec in &manifest.entries {
        if rec.shape.is_some() {
            return Err(Error::invalid(format!(
                "{}: entry has a dense shape; load it as a dense pool",
                rec.model_id
            )));
        }
        let logits = read_f32_values(&base.join(&rec.logits), n * c, &rec.model_id)?;
        let mut set = PredictionSet::new(&rec.model_id, &rec.model_type, logits, c, rec.cost)?;
        set.resolution = rec.resolution;
        set.replicate_index = rec.replicate_index;
        entries.push(set);
    }
    ModelPool::new(entries, LabeledDataset::new(labels))
}

/// Writes `pool.json`, `labels.u32` and one `.f32` blob per entry into `dir`.
pub fn save_pool(pool: &ModelPool, dir: impl AsRef<Path>) -> Result<PoolManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // Pools built through `ModelPool::new` are already valid; re-check ids
    // since the fields are public.
    let mut ids = HashSet::new();
    for e in pool.entries() {
        if !ids.insert(e.model_id.as_str()) {
            return Err(Error::DuplicateModelId(e.model_id.clone()));
        }
    }
    write_u32_blob(&dir.join(LABELS_FILE), &pool.labels().labels)?;
    let mut records = Vec::with_capacity(pool.entries().len());
    for (i, e) in pool.entries().iter().enumerate() {
        let name = blob_name(i, &e.model_id);
        write_f32_blob(&dir.join(&name), e.logits())?;
        records.push(ManifestEntry {
            model_id: e.model_id.clone(),
            model_type: e.model_type.clone(),
            cost: e.cost,
            resolution: e.resolution,
            replicate_index: e.replicate_index,
            logits: name,
            shape: None,
        });
    }
    let manifest = PoolManifest {
        version: MANIFEST_VERSION,
        num_examples: pool.num_examples(),
        num_classes: pool.num_classes(),
        labels: LABELS_FILE.to_string(),
        entries: records,
        ignore_label: None,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Splits a pool's examples into two disjoint halves.
///
/// The first half receives `floor(fraction * N)` examples. Indices are
/// shuffled with ChaCha8 seeded from `seed`, so the split is reproducible
/// across platforms; each half keeps the original example order.
pub fn split_dataset(pool: &ModelPool, fraction: f64, seed: u64) -> Result<(ModelPool, ModelPool)> {
    let n = pool.num_examples();
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction {fraction} is outside (0, 1)"
        )));
    }
    // The small offset keeps products such as 0.29 * 100 from flooring to 28.
    let first_len = (fraction * n as f64 + 1e-9).floor() as usize;
    if first_len == 0 || first_len >= n {
        return Err(Error::invalid(format!(
            "split fraction {fraction} of {n} examples leaves an empty half"
        )));
    }
    let (a, b) = split_indices(n, first_len, seed);
    let mut first = pool.select_examples(&a);
    let mut second = pool.select_examples(&b);
    first.labels.split_tag = "threshold-selection".to_string();
    second.labels.split_tag = "evaluation".to_string();
    Ok((first, second))
}

/// Seeded partition of `0..n` into `first_len` and `n - first_len`
/// indices, each half sorted ascending.
pub fn split_indices(n: usize, first_len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut second = order.split_off(first_len.min(n));
    order.sort_unstable();
    second.sort_unstable();
    (order, second)
}

/// Parameters of [`generate_synthetic_pool`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_examples: usize,
    pub num_classes: usize,
    /// Target top-1 accuracy per model, in `(1/C, 1]`.
    pub accuracies: Vec<f64>,
    /// Cost per model.
    pub costs: Vec<f64>,
    /// Share of example difficulty common to all models, in `[0, 1]`.
    /// 1 means all models err on the same examples.
    pub correlation: f64,
    pub seed: u64,
    /// Optional model types (defaults to `m{i}`); repeated types become
    /// replicates.
    #[serde(default)]
    pub model_types: Option<Vec<String>>,
}

impl SynthConfig {
    pub fn new(
        num_examples: usize,
        num_classes: usize,
        accuracies: Vec<f64>,
        costs: Vec<f64>,
    ) -> Self {
        SynthConfig {
            num_examples,
            num_classes,
            accuracies,
            costs,
            correlation: 0.5,
            seed: 0,
            model_types: None,
        }
    }

    pub fn correlation(mut self, correlation: f64) -> Self {
        self.correlation = correlation;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn model_types<S: Into<String>>(mut self, types: impl IntoIterator<Item = S>) -> Self {
        self.model_types = Some(types.into_iter().map(Into::into).collect());
        self
    }
}

/// Generates a calibrated synthetic pool.
///
/// Every example gets a difficulty mixing a shared and a per-model uniform
/// draw. Each model is correct on exactly `round(accuracy * N)` of its
/// easiest examples, so measured accuracy is within `1/N` of the target.
/// The winning logit margin shrinks with difficulty and is smaller on wrong
/// predictions, which makes max-probability confidence informative. Margins
/// grow with model cost, so costlier models are more confident when right.
pub fn generate_synthetic_pool(config: &SynthConfig) -> Result<ModelPool> {
    let n = config.num_examples;
    let c = config.num_classes;
    let m = config.accuracies.len();
    if n == 0 || c < 2 {
        return Err(Error::invalid("synthetic pool needs N >= 1 and C >= 2"));
    }
    if m == 0 || config.costs.len() != m {
        return Err(Error::invalid(format!(
            "{m} accuracy targets but {} costs",
            config.costs.len()
        )));
    }
    for &a in &config.accuracies {
        if !(a > 1.0 / c as f64 && a <= 1.0) {
            return Err(Error::invalid(format!(
                "accuracy target {a} must lie in (1/C, 1] with C = {c}"
            )));
        }
    }
    for (i, &cost) in config.costs.iter().enumerate() {
        check_cost(&format!("m{i}"), cost)?;
    }
    if !(0.0..=1.0).contains(&config.correlation) {
        return Err(Error::invalid("correlation must lie in [0, 1]"));
    }
    let types: Vec<String> = match &config.model_types {
        Some(t) if t.len() == m => t.clone(),
        Some(t) => {
            return Err(Error::invalid(format!(
                "{} model types for {m} models",
                t.len()
            )));
        }
        None => (0..m).map(|i| format!("m{i}")).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
    let shared: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let max_cost = config.costs.iter().copied().fold(f64::MIN, f64::max);
    let rho = config.correlation;

    let mut entries = Vec::with_capacity(m);
    let mut replicate_counts: Vec<(String, u32)> = Vec::new();
    for model in 0..m {
        let difficulty: Vec<f64> = shared
            .iter()
            .map(|&s| rho * s + (1.0 - rho) * rng.random::<f64>())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| difficulty[a].total_cmp(&difficulty[b]));
        let num_correct = (config.accuracies[model] * n as f64).round() as usize;
        let mut correct = vec![false; n];
        for &i in &order[..num_correct] {
            correct[i] = true;
        }

        let strength = 3.0 + 3.0 * config.costs[model] / max_cost;
        let mut logits = vec![0f32; n * c];
        for i in 0..n {
            let row = &mut logits[i * c..(i + 1) * c];
            for v in row.iter_mut() {
                *v = noise.sample(&mut rng) as f32;
            }
            let label = labels[i] as usize;
            let ease = 1.0 - difficulty[i];
            let (winner, margin) = if correct[i] {
                (label, strength * (0.25 + ease))
            } else {
                let mut wrong = rng.random_range(0..c - 1);
                if wrong >= label {
                    wrong += 1;
                }
                (wrong, 0.5 + 0.5 * strength * ease * rng.random::<f64>())
            };
            row[winner] += margin as f32;
            // Force the intended winner strictly on top.
            let runner_up = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != winner)
                .map(|(_, &v)| v)
                .fold(f32::MIN, f32::max);
            if row[winner] <= runner_up {
                row[winner] = runner_up + 0.05;
            }
        }

        let model_type = types[model].clone();
        let replicate = match replicate_counts.iter_mut().find(|(t, _)| *t == model_type) {
            Some((_, count)) => {
                *count += 1;
                *count - 1
            }
            None => {
                replicate_counts.push((model_type.clone(), 1));
                0
            }
        };
        let id = if config.model_types.is_some() {
            format!("{model_type}-{replicate}")
        } else {
            model_type.clone()
        };
        entries.push(
            PredictionSet::new(id, model_type, logits, c, config.costs[model])?
                .with_replicate(replicate),
        );
    }
    ModelPool::new(entries, LabeledDataset::new(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_pool() -> ModelPool {
        let a = PredictionSet::new("a", "t", vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], 2, 1.0).unwrap();
        let b = PredictionSet::new("b", "t", vec![0.0, 2.0, 2.0, 0.0, 1.0, 3.0], 2, 2.0)
            .unwrap()
            .with_replicate(1);
        ModelPool::new(vec![a, b], LabeledDataset::new(vec![0, 1, 1])).unwrap()
    }

    #[test]
    fn load_two_entry_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_pool(&tiny_pool(), dir.path()).unwrap();
        let pool = load_pool(dir.path().join("pool.json")).unwrap();
        assert_eq!(pool.num_examples(), 3);
        assert_eq!(pool.num_classes(), 2);
        assert_eq!(pool.entries().len(), 2);
    }

    #[test]
    fn short_blob_is_a_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_pool(&tiny_pool(), dir.path()).unwrap();
        let blob = dir.path().join(&manifest.entries[1].logits);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        match load_pool(dir.path()) {
            Err(Error::DimensionMismatch {
                entry,
                expected,
                actual,
            }) => {
                assert_eq!(entry, "b");
                assert_eq!((expected, actual), (6, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_reports_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_pool(&tiny_pool(), dir.path()).unwrap();

        let blob = dir.path().join(&manifest.entries[0].logits);
        let mut values = read_f32_values(&blob, 6, "a").unwrap();
        values[3] = f32::NAN;
        write_f32_blob(&blob, &values).unwrap();
        assert!(matches!(
            load_pool(dir.path()),
            Err(Error::NonFinite { ref entry, example: 1, class: 1 }) if entry == "a"
        ));
        values[3] = 0.0;
        write_f32_blob(&blob, &values).unwrap();

        write_u32_blob(&dir.path().join(LABELS_FILE), &[0, 5, 1]).unwrap();
        assert!(matches!(
            load_pool(dir.path()),
            Err(Error::LabelOutOfRange {
                example: 1,
                label: 5,
                ..
            })
        ));

        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(load_pool(dir.path()), Err(Error::Io { .. })));
        assert!(matches!(
            load_pool(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_field_names() {
        let dir = tempfile::tempdir().unwrap();
        save_pool(&tiny_pool(), dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("pool.json")).unwrap())
                .unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "entries",
                "labels",
                "num_classes",
                "num_examples",
                "version"
            ]
        );
        let mut entry_keys: Vec<_> = v["entries"][0]
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        entry_keys.sort();
        assert_eq!(
            entry_keys,
            [
                "cost",
                "logits",
                "model_id",
                "model_type",
                "replicate_index",
                "resolution"
            ]
        );
        assert!(v["entries"][0]["resolution"].is_null());
    }

    #[test]
    fn csv_blobs_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1.5, -2\n0,3\n").unwrap();
        fs::write(dir.path().join("labels.csv"), "0\n1\n").unwrap();
        fs::write(
            dir.path().join("pool.json"),
            r#"{"version":1,"num_examples":2,"num_classes":2,"labels":"labels.csv",
               "entries":[{"model_id":"a","model_type":"t","cost":1.0,"resolution":224,
                           "replicate_index":0,"logits":"a.csv"}]}"#,
        )
        .unwrap();
        let pool = load_pool(dir.path()).unwrap();
        assert_eq!(pool.entries()[0].logits(), &[1.5, -2.0, 0.0, 3.0]);
        assert_eq!(pool.entries()[0].resolution, Some(224));
        assert_eq!(pool.labels().labels, vec![0, 1]);
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("pool.json"),
            r#"{"version":2,"num_examples":1,"num_classes":1,"labels":"l","entries":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_pool(dir.path()),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn pool_invariants() {
        let a = PredictionSet::new("a", "t", vec![0.0; 4], 2, 1.0).unwrap();
        let labels = LabeledDataset::new(vec![0, 1]);
        assert!(matches!(
            ModelPool::new(vec![a.clone(), a.clone()], labels.clone()),
            Err(Error::DuplicateModelId(_))
        ));
        let mut b = a.clone();
        b.model_id = "b".into();
        assert!(matches!(
            ModelPool::new(vec![a.clone(), b], labels.clone()),
            Err(Error::DuplicateReplicate { .. })
        ));
        assert!(matches!(
            ModelPool::new(vec![], labels),
            Err(Error::EmptyPool)
        ));
        assert!(PredictionSet::new("x", "t", vec![0.0; 4], 2, 0.0).is_err());
        assert!(PredictionSet::new("x", "t", vec![0.0; 3], 2, 1.0).is_err());
    }

    #[test]
    fn save_rejects_duplicate_ids() {
        let mut pool = tiny_pool();
        pool.entries[1].model_id = "a".into();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_pool(&pool, dir.path()),
            Err(Error::DuplicateModelId(_))
        ));
    }

    #[test]
    fn save_one_entry_into_empty_dir() {
        let pool = ModelPool::new(
            vec![tiny_pool().entries()[0].clone()],
            LabeledDataset::new(vec![0, 1, 1]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_pool(&pool, dir.path().join("out")).unwrap();
        assert_eq!(manifest.entries.len(), 1);
        assert!(dir.path().join("out/pool.json").exists());
    }

    fn sized_pool(n: usize) -> ModelPool {
        generate_synthetic_pool(&SynthConfig::new(n, 3, vec![0.7], vec![1.0]).seed(3)).unwrap()
    }

    #[test]
    fn split_halves() {
        let pool = sized_pool(10);
        let (a, b) = split_dataset(&pool, 0.5, 7).unwrap();
        assert_eq!((a.num_examples(), b.num_examples()), (5, 5));
        let (a2, b2) = split_dataset(&pool, 0.5, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);

        let (a, b) = split_dataset(&pool, 0.99, 7).unwrap();
        assert_eq!((a.num_examples(), b.num_examples()), (9, 1));
        assert!(split_dataset(&pool, 0.01, 7).is_err());
        assert!(split_dataset(&pool, 1.0, 7).is_err());
        assert_eq!(
            split_dataset(&sized_pool(100), 0.29, 1)
                .unwrap()
                .0
                .num_examples(),
            29
        );
    }

    #[test]
    fn synthetic_accuracy_one() {
        let pool =
            generate_synthetic_pool(&SynthConfig::new(200, 5, vec![1.0], vec![1.0])).unwrap();
        assert_eq!(pool.entries()[0].accuracy(pool.labels()), 1.0);
    }

    #[test]
    fn synthetic_rejects_chance_accuracy() {
        assert!(generate_synthetic_pool(&SynthConfig::new(100, 4, vec![0.25], vec![1.0])).is_err());
        assert!(generate_synthetic_pool(&SynthConfig::new(100, 4, vec![0.5], vec![-1.0])).is_err());
        assert!(generate_synthetic_pool(&SynthConfig::new(100, 4, vec![0.5], vec![])).is_err());
    }

    #[test]
    fn synthetic_replicates() {
        let cfg = SynthConfig::new(50, 3, vec![0.6, 0.6, 0.8], vec![1.0, 1.0, 3.0])
            .model_types(["A", "A", "B"]);
        let pool = generate_synthetic_pool(&cfg).unwrap();
        let ids: Vec<_> = pool
            .entries()
            .iter()
            .map(|e| (e.model_id.as_str(), e.replicate_index))
            .collect();
        assert_eq!(ids, [("A-0", 0), ("A-1", 1), ("B-0", 0)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn save_load_is_bit_exact(seed in any::<u64>(), n in 1usize..40, c in 2usize..6) {
            let cfg = SynthConfig::new(n, c, vec![0.9, 0.95], vec![1.0, 2.5]).seed(seed);
            let pool = generate_synthetic_pool(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let manifest = save_pool(&pool, dir.path()).unwrap();
            let loaded = load_pool(dir.path()).unwrap();
            prop_assert_eq!(&loaded, &pool);
            for (rec, e) in manifest.entries.iter().zip(pool.entries()) {
                let bytes = fs::read(dir.path().join(&rec.logits)).unwrap();
                let expected: Vec<u8> = e.logits().iter().flat_map(|v| v.to_le_bytes()).collect();
                prop_assert_eq!(bytes, expected);
            }
        }

        #[test]
        fn split_is_a_partition(seed in any::<u64>(), n in 2usize..60, fraction in 0.05f64..0.95) {
            let pool = sized_pool(n);
            let first_len = (fraction * n as f64 + 1e-9).floor() as usize;
            match split_dataset(&pool, fraction, seed) {
                Ok((a, b)) => {
                    prop_assert_eq!(a.num_examples(), first_len);
                    prop_assert_eq!(a.num_examples() + b.num_examples(), n);
                }
                Err(_) => prop_assert!(first_len == 0 || first_len == n),
            }
        }

        #[test]
        fn split_indices_disjoint_and_exhaustive(seed in any::<u64>(), n in 1usize..200, cut in 0usize..200) {
            let cut = cut.min(n);
            let (a, b) = split_indices(n, cut, seed);
            prop_assert_eq!(a.len(), cut);
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(split_indices(n, cut, seed), (a, b));
        }

        #[test]
        fn synthetic_generation_is_pure(seed in any::<u64>()) {
            let cfg = SynthConfig::new(64, 4, vec![0.6, 0.8], vec![1.0, 3.0]).seed(seed);
            prop_assert_eq!(generate_synthetic_pool(&cfg).unwrap(), generate_synthetic_pool(&cfg).unwrap());
        }
    }
}
