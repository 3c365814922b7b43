//! Cascades for per-pixel (dense) prediction.
//!
//! Images are split into square cells and each cell is routed through the
//! cascade on its own. A cell's confidence is the mean per-pixel max
//! probability over the pixels whose own confidence is above `t_unlab`;
//! pixels below it are treated as likely unlabeled and do not vote. A cell
//! with no voting pixel scores 0 and is always routed onward.
//!
//! Cost model: running stage `i` on a cell costs `cost_i * cell_area /
//! image_area`. This assumes a fully convolutional model whose cost scales
//! linearly with area and ignores any context halo around the cell.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{avg_cost_from_counts, AggregationMode};
use crate::confidence::{argmax, softmax_into, ConfidenceMetric};
use crate::error::{Error, Result};
use crate::par;
use crate::store::{
    blob_name, check_finite, manifest_file, read_f32_values, read_u32_values, write_f32_blob,
    write_u32_blob, ManifestEntry, PoolManifest, LABELS_FILE, MANIFEST_FILE, MANIFEST_VERSION,
};
use crate::thresholds::ThresholdTarget;

pub const DEFAULT_IGNORE_LABEL: u32 = 255;
pub const DEFAULT_T_UNLAB: f64 = 0.5;

/// Per-pixel logits of one model: `N x H x W x C`, pixel-major per image.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePredictionSet {
    pub model_id: String,
    pub model_type: String,
    /// Cost of running the model on one full image.
    pub cost: f64,
    height: usize,
    width: usize,
    num_classes: usize,
    logits: Vec<f32>,
}

impl DensePredictionSet {
    pub fn new(
        model_id: impl Into<String>,
        model_type: impl Into<String>,
        logits: Vec<f32>,
        [height, width]: [usize; 2],
        num_classes: usize,
        cost: f64,
    ) -> Result<Self> {
        let model_id = model_id.into();
        let image_len = height * width * num_classes;
        if image_len == 0 || logits.is_empty() || !logits.len().is_multiple_of(image_len) {
            return Err(Error::DimensionMismatch {
                entry: model_id,
                expected: (logits.len() / image_len.max(1)).max(1) * image_len,
                actual: logits.len(),
            });
        }
        if !(cost > 0.0 && cost.is_finite()) {
            return Err(Error::InvalidCost {
                entry: model_id,
                cost,
            });
        }
        check_finite(&model_id, &logits, num_classes)?;
        Ok(DensePredictionSet {
            model_id,
            model_type: model_type.into(),
            cost,
            height,
            width,
            num_classes,
            logits,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_images(&self) -> usize {
        self.logits.len() / (self.height * self.width * self.num_classes)
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Logits of one pixel; `pixel` indexes all pixels of all images.
    pub fn pixel(&self, pixel: usize) -> &[f32] {
        &self.logits[pixel * self.num_classes..(pixel + 1) * self.num_classes]
    }
}

/// Per-pixel ground truth, `N x H x W`, with an ignore label for unlabeled
/// pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseLabelSet {
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub ignore_label: u32,
}

impl DenseLabelSet {
    pub fn new(labels: Vec<u32>, [height, width]: [usize; 2], ignore_label: u32) -> Result<Self> {
        let area = height * width;
        if area == 0 || labels.is_empty() || !labels.len().is_multiple_of(area) {
            return Err(Error::DimensionMismatch {
                entry: "labels".into(),
                expected: (labels.len() / area.max(1)).max(1) * area,
                actual: labels.len(),
            });
        }
        Ok(DenseLabelSet {
            labels,
            height,
            width,
            ignore_label,
        })
    }

    pub fn num_images(&self) -> usize {
        self.labels.len() / (self.height * self.width)
    }
}

/// Validated dense entries sharing one label set.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePool {
    entries: Vec<DensePredictionSet>,
    labels: DenseLabelSet,
}

impl DensePool {
    pub fn new(entries: Vec<DensePredictionSet>, labels: DenseLabelSet) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyPool)?;
        let (shape, c) = (first.shape(), first.num_classes);
        let mut ids = HashSet::new();
        for e in &entries {
            if e.shape() != shape
                || e.num_classes != c
                || e.num_images() != labels.num_images()
                || shape != [labels.height, labels.width]
            {
                return Err(Error::DimensionMismatch {
                    entry: e.model_id.clone(),
                    expected: labels.labels.len() * c,
                    actual: e.logits.len(),
                });
            }
            if !ids.insert(e.model_id.as_str()) {
                return Err(Error::DuplicateModelId(e.model_id.clone()));
            }
        }
        if let Some(example) = labels
            .labels
            .iter()
            .position(|&l| l != labels.ignore_label && l as usize >= c)
        {
            return Err(Error::LabelOutOfRange {
                example,
                label: labels.labels[example],
                num_classes: c,
            });
        }
        Ok(DensePool { entries, labels })
    }

    pub fn entries(&self) -> &[DensePredictionSet] {
        &self.entries
    }

    pub fn labels(&self) -> &DenseLabelSet {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.entries[0].num_classes
    }

    pub fn num_images(&self) -> usize {
        self.labels.num_images()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.labels.height, self.labels.width]
    }

    pub fn index_of(&self, model_id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.model_id == model_id)
            .ok_or_else(|| Error::UnknownModel(model_id.to_string()))
    }
}

/// Loads a dense pool: the pool manifest with a `shape` on every entry and
/// `num_examples` counting images.
pub fn load_dense_pool(manifest_path: impl AsRef<Path>) -> Result<DensePool> {
    let path = manifest_file(manifest_path.as_ref());
    let manifest = PoolManifest::read(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let (n, c) = (manifest.num_examples, manifest.num_classes);
    let first_shape = manifest
        .entries
        .first()
        .ok_or(Error::EmptyPool)?
        .shape
        .ok_or_else(|| Error::invalid("dense entries need a `shape`: [H, W]"))?;
    let area = first_shape[0] * first_shape[1];
    let labels = read_u32_values(&base.join(&manifest.labels), n * area)?;
    let labels = DenseLabelSet::new(
        labels,
        first_shape,
        manifest.ignore_label.unwrap_or(DEFAULT_IGNORE_LABEL),
    )?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for rec in &manifest.entries {
        let shape = rec.shape.ok_or_else(|| {
            Error::invalid(format!("{}: dense entries need a `shape`", rec.model_id))
        })?;
        if shape != first_shape {
            return Err(Error::DimensionMismatch {
                entry: rec.model_id.clone(),
                expected: area,
                actual: shape[0] * shape[1],
            });
        }
        let logits = read_f32_values(&base.join(&rec.logits), n * area * c, &rec.model_id)?;
        entries.push(DensePredictionSet::new(
            &rec.model_id,
            &rec.model_type,
            logits,
            shape,
            c,
            rec.cost,
        )?);
    }
    DensePool::new(entries, labels)
}

pub fn save_dense_pool(pool: &DensePool, dir: impl AsRef<Path>) -> Result<PoolManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_u32_blob(&dir.join(LABELS_FILE), &pool.labels.labels)?;
    let mut records = Vec::new();
    for (i, e) in pool.entries.iter().enumerate() {
        let name = blob_name(i, &e.model_id);
        write_f32_blob(&dir.join(&name), &e.logits)?;
        records.push(ManifestEntry {
            model_id: e.model_id.clone(),
            model_type: e.model_type.clone(),
            cost: e.cost,
            resolution: None,
            replicate_index: 0,
            logits: name,
            shape: Some(e.shape()),
        });
    }
    let manifest = PoolManifest {
        version: MANIFEST_VERSION,
        num_examples: pool.num_images(),
        num_classes: pool.num_classes(),
        labels: LABELS_FILE.to_string(),
        entries: records,
        ignore_label: Some(pool.labels.ignore_label),
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Routing granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSize {
    /// One decision per image.
    Full,
    /// Square cells of this side length; must divide both H and W.
    Size(usize),
}

impl std::str::FromStr for CellSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(CellSize::Full);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&r| r > 0)
            .map(CellSize::Size)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "cell size `{s}` is neither `full` nor a positive integer"
                ))
            })
    }
}

/// Cell layout of an `H x W` image.
#[derive(Debug, Clone, Copy)]
struct CellGrid {
    height: usize,
    width: usize,
    cell_h: usize,
    cell_w: usize,
}

impl CellGrid {
    fn new(cell: CellSize, [height, width]: [usize; 2]) -> Result<Self> {
        let (cell_h, cell_w) = match cell {
            CellSize::Full => (height, width),
            CellSize::Size(r) => {
                if r == 0 || height % r != 0 || width % r != 0 {
                    return Err(Error::invalid(format!(
                        "cell size {r} does not divide the {height}x{width} image"
                    )));
                }
                (r, r)
            }
        };
        Ok(CellGrid {
            height,
            width,
            cell_h,
            cell_w,
        })
    }

    fn cells_per_image(&self) -> usize {
        (self.height / self.cell_h) * (self.width / self.cell_w)
    }

    /// Cell index (within the image) of the pixel at row-major offset `p`.
    fn cell_of(&self, p: usize) -> usize {
        let (y, x) = (p / self.width, p % self.width);
        (y / self.cell_h) * (self.width / self.cell_w) + x / self.cell_w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCascadeSpec {
    pub models: Vec<String>,
    pub thresholds: Vec<f64>,
    #[serde(default = "default_t_unlab")]
    pub t_unlab: f64,
    pub cell: CellSize,
    /// Only max probability is supported for dense routing.
    #[serde(default)]
    pub metric: ConfidenceMetric,
    #[serde(default)]
    pub aggregation: AggregationMode,
}

fn default_t_unlab() -> f64 {
    DEFAULT_T_UNLAB
}

impl DenseCascadeSpec {
    pub fn new<S: Into<String>>(
        models: impl IntoIterator<Item = S>,
        thresholds: Vec<f64>,
        cell: CellSize,
    ) -> Self {
        DenseCascadeSpec {
            models: models.into_iter().map(Into::into).collect(),
            thresholds,
            t_unlab: DEFAULT_T_UNLAB,
            cell,
            metric: ConfidenceMetric::MaxProb,
            aggregation: AggregationMode::MeanLogits,
        }
    }

    pub fn with_t_unlab(mut self, t_unlab: f64) -> Self {
        self.t_unlab = t_unlab;
        self
    }
}

/// Region confidence: mean max-probability over pixels whose own max
/// probability exceeds `t_unlab`; 0 when no pixel does.
///
/// `region_logits` holds `pixels x num_classes` values.
pub fn dense_confidence<T: Copy + Into<f64>>(
    region_logits: &[T],
    num_classes: usize,
    t_unlab: f64,
) -> f64 {
    let mut probs = Vec::with_capacity(num_classes);
    filtered_mean(
        region_logits.chunks_exact(num_classes).map(|px| {
            softmax_into(px, &mut probs);
            ConfidenceMetric::MaxProb.score_probs(&probs)
        }),
        t_unlab,
    )
}

fn filtered_mean(scores: impl Iterator<Item = f64>, t_unlab: f64) -> f64 {
    let (sum, count) = scores
        .filter(|&s| s > t_unlab)
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Per-class IoU (`None` for classes absent from both prediction and
/// labels) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Mean IoU over non-ignored pixels.
pub fn miou(pred_labels: &[u32], labels: &DenseLabelSet, num_classes: usize) -> Result<IouReport> {
    if pred_labels.len() != labels.labels.len() {
        return Err(Error::DimensionMismatch {
            entry: "predictions".into(),
            expected: labels.labels.len(),
            actual: pred_labels.len(),
        });
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    let mut counted = 0usize;
    for (i, (&p, &l)) in pred_labels.iter().zip(&labels.labels).enumerate() {
        if l == labels.ignore_label {
            continue;
        }
        if p as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                example: i,
                label: p,
                num_classes,
            });
        }
        counted += 1;
        if p == l {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[l as usize] += 1;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("every pixel carries the ignore label"));
    }
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let union = tp[c] + fp[c] + fn_[c];
            (union > 0).then(|| tp[c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport {
        per_class_iou,
        miou,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseEvaluation {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean per-image cost under area-proportional cell costs.
    pub avg_cost: f64,
    pub worst_case_cost: f64,
    /// Fraction of all cells exiting at each stage.
    pub cell_exit_ratios: Vec<f64>,
    pub cell_exit_counts: Vec<usize>,
    pub cells_per_image: usize,
}

/// Threshold-independent per-stage cell confidences and pixel predictions.
pub struct DenseStaged<'a> {
    pool: &'a DensePool,
    cells: CellGrid,
    /// `[stage][image * cells_per_image + cell]`
    cell_confidence: Vec<Vec<f64>>,
    /// `[stage][pixel]`
    pixel_pred: Vec<Vec<u32>>,
    cum_costs: Vec<f64>,
    metric: ConfidenceMetric,
}

impl<'a> DenseStaged<'a> {
    pub fn new(spec: &DenseCascadeSpec, pool: &'a DensePool) -> Result<Self> {
        if spec.metric != ConfidenceMetric::MaxProb {
            return Err(Error::invalid(format!(
                "dense cascades support only max_prob confidence, got {}",
                spec.metric
            )));
        }
        if !(0.0..=1.0).contains(&spec.t_unlab) {
            return Err(Error::invalid(format!(
                "t_unlab {} is outside [0, 1]",
                spec.t_unlab
            )));
        }
        if spec.models.is_empty() {
            return Err(Error::invalid("a cascade needs at least one model"));
        }
        if spec.thresholds.len() != spec.models.len() - 1 {
            return Err(Error::ThresholdCount {
                expected: spec.models.len() - 1,
                actual: spec.thresholds.len(),
            });
        }
        let mut indices = Vec::new();
        for id in &spec.models {
            let i = pool.index_of(id)?;
            if indices.contains(&i) {
                return Err(Error::RepeatedModel(id.clone()));
            }
            indices.push(i);
        }
        let cells = CellGrid::new(spec.cell, pool.shape())?;
        let entries: Vec<&DensePredictionSet> = indices.iter().map(|&i| &pool.entries[i]).collect();
        let c = pool.num_classes();
        let area = cells.height * cells.width;
        let per_cell = cells.cells_per_image();
        let stages = entries.len();
        let aggregation = spec.aggregation;
        let t_unlab = spec.t_unlab;

        // Per image: ([stage][cell] confidences, [stage][pixel] predictions).
        let per_image: Vec<(Vec<Vec<f64>>, Vec<Vec<u32>>)> =
            par::map_indexed(pool.num_images(), |img| {
                let mut sum = vec![0f64; area * c];
                let mut agg = vec![0f64; c];
                let mut probs = Vec::with_capacity(c);
                let mut confs = Vec::with_capacity(stages);
                let mut preds = Vec::with_capacity(stages);
                for (k, entry) in entries.iter().enumerate() {
                    let mut cell_sum = vec![0f64; per_cell];
                    let mut cell_count = vec![0usize; per_cell];
                    let mut stage_pred = Vec::with_capacity(area);
                    for p in 0..area {
                        let px = entry.pixel(img * area + p);
                        let acc = &mut sum[p * c..(p + 1) * c];
                        match aggregation {
                            AggregationMode::MeanLogits => {
                                for (s, &v) in acc.iter_mut().zip(px) {
                                    *s += f64::from(v);
                                }
                            }
                            AggregationMode::MeanProbs => {
                                softmax_into(px, &mut probs);
                                for (s, &v) in acc.iter_mut().zip(&probs) {
                                    *s += v;
                                }
                            }
                        }
                        let count = (k + 1) as f64;
                        for (a, &s) in agg.iter_mut().zip(acc.iter()) {
                            *a = s / count;
                        }
                        let score = match aggregation {
                            AggregationMode::MeanLogits => {
                                softmax_into(&agg, &mut probs);
                                ConfidenceMetric::MaxProb.score_probs(&probs)
                            }
                            AggregationMode::MeanProbs => {
                                ConfidenceMetric::MaxProb.score_probs(&agg)
                            }
                        };
                        stage_pred.push(argmax(&agg) as u32);
                        if score > t_unlab {
                            let cell = cells.cell_of(p);
                            cell_sum[cell] += score;
                            cell_count[cell] += 1;
                        }
                    }
                    confs.push(
                        cell_sum
                            .iter()
                            .zip(&cell_count)
                            .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
                            .collect(),
                    );
                    preds.push(stage_pred);
                }
                (confs, preds)
            });

        let mut cell_confidence = vec![Vec::with_capacity(pool.num_images() * per_cell); stages];
        let mut pixel_pred = vec![Vec::with_capacity(pool.num_images() * area); stages];
        for (confs, preds) in per_image {
            for (k, (cf, pr)) in confs.into_iter().zip(preds).enumerate() {
                cell_confidence[k].extend(cf);
                pixel_pred[k].extend(pr);
            }
        }
        let mut cum_costs = Vec::with_capacity(stages);
        let mut running = 0.0;
        for e in &entries {
            running += e.cost;
            cum_costs.push(running);
        }
        Ok(DenseStaged {
            pool,
            cells,
            cell_confidence,
            pixel_pred,
            cum_costs,
            metric: spec.metric,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.cum_costs.len()
    }

    /// Confidence of every cell after `stage` (0-based) as if routed there.
    pub fn cell_confidence(&self, stage: usize) -> &[f64] {
        &self.cell_confidence[stage]
    }

    /// Routes every cell and scores the resulting per-pixel predictions.
    pub fn evaluate(&self, thresholds: &[f64]) -> Result<DenseEvaluation> {
        let stages = self.num_stages();
        if thresholds.len() != stages - 1 {
            return Err(Error::ThresholdCount {
                expected: stages - 1,
                actual: thresholds.len(),
            });
        }
        let per_cell = self.cells.cells_per_image();
        let total_cells = self.pool.num_images() * per_cell;
        let mut counts = vec![0usize; stages];
        let cell_stage: Vec<usize> = (0..total_cells)
            .map(|cell| {
                let s = thresholds
                    .iter()
                    .enumerate()
                    .find(|&(k, &t)| self.metric.exits(self.cell_confidence[k][cell], t))
                    .map_or(stages - 1, |(k, _)| k);
                counts[s] += 1;
                s
            })
            .collect();
        let area = self.cells.height * self.cells.width;
        let pred: Vec<u32> = (0..self.pool.num_images() * area)
            .map(|px| {
                let cell = (px / area) * per_cell + self.cells.cell_of(px % area);
                self.pixel_pred[cell_stage[cell]][px]
            })
            .collect();
        let iou = miou(&pred, &self.pool.labels, self.pool.num_classes())?;
        Ok(DenseEvaluation {
            miou: iou.miou,
            per_class_iou: iou.per_class_iou,
            // Each cell costs cum_cost * (1 / cells_per_image) of an image.
            avg_cost: avg_cost_from_counts(&counts, &self.cum_costs, total_cells),
            worst_case_cost: *self.cum_costs.last().unwrap(),
            cell_exit_ratios: counts
                .iter()
                .map(|&c| c as f64 / total_cells as f64)
                .collect(),
            cell_exit_counts: counts,
            cells_per_image: per_cell,
        })
    }
}

pub fn evaluate_dense_cascade(
    spec: &DenseCascadeSpec,
    pool: &DensePool,
) -> Result<DenseEvaluation> {
    DenseStaged::new(spec, pool)?.evaluate(&spec.thresholds)
}

/// Percentile candidates per stage over cell confidences, plus 0 and 1.
pub fn dense_threshold_grid(
    staged: &DenseStaged<'_>,
    grid_resolution: usize,
) -> Result<Vec<Vec<f64>>> {
    if grid_resolution < 2 {
        return Err(Error::invalid("grid resolution must be at least 2"));
    }
    Ok((0..staged.num_stages() - 1)
        .map(|k| {
            let mut sorted = staged.cell_confidence(k).to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let mut list = vec![0.0, 1.0];
            for j in 1..=grid_resolution {
                list.push(sorted[(2 * j * (n - 1) + grid_resolution) / (2 * grid_resolution)]);
            }
            list.sort_by(f64::total_cmp);
            list.dedup();
            list
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSearch {
    pub thresholds: Vec<f64>,
    pub evaluation: DenseEvaluation,
}

/// Exhaustive threshold search for a dense cascade, with mIoU in the role
/// of accuracy. `spec.thresholds` is ignored.
pub fn search_dense_thresholds(
    spec: &DenseCascadeSpec,
    pool: &DensePool,
    target: ThresholdTarget,
    grid_resolution: usize,
) -> Result<DenseSearch> {
    let mut spec = spec.clone();
    spec.thresholds = vec![1.0; spec.models.len().saturating_sub(1)];
    let staged = DenseStaged::new(&spec, pool)?;
    let grid = dense_threshold_grid(&staged, grid_resolution)?;
    let ensemble = staged.evaluate(&spec.thresholds)?;
    let (budget, floor) = match target {
        ThresholdTarget::CostBudget(b) => (Some(b), None),
        ThresholdTarget::AccuracyFloor(g) => (None, Some(g)),
        ThresholdTarget::MatchEnsemble(e) => (None, Some(ensemble.miou - e)),
    };

    let mut best: Option<(Vec<f64>, DenseEvaluation)> = None;
    let mut closest: Option<DenseEvaluation> = None;
    let mut idx = vec![0usize; grid.len()];
    loop {
        let t: Vec<f64> = idx.iter().enumerate().map(|(k, &j)| grid[k][j]).collect();
        let eval = staged.evaluate(&t)?;
        let feasible = match (budget, floor) {
            (Some(b), _) => eval.avg_cost <= b,
            (_, Some(g)) => eval.miou >= g,
            _ => unreachable!(),
        };
        if closest.as_ref().is_none_or(|c| match budget {
            Some(_) => eval.avg_cost < c.avg_cost,
            None => eval.miou > c.miou,
        }) {
            closest = Some(eval.clone());
        }
        let better = best.as_ref().is_none_or(|(_, b)| match budget {
            Some(_) => eval.miou > b.miou || (eval.miou == b.miou && eval.avg_cost < b.avg_cost),
            None => {
                eval.avg_cost < b.avg_cost || (eval.avg_cost == b.avg_cost && eval.miou > b.miou)
            }
        });
        if feasible && better {
            best = Some((t, eval));
        }

        let mut k = grid.len();
        let done = loop {
            if k == 0 {
                break true;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < grid[k].len() {
                break false;
            }
            idx[k] = 0;
        };
        if done {
            break;
        }
    }
    match best {
        Some((thresholds, evaluation)) => Ok(DenseSearch {
            thresholds,
            evaluation,
        }),
        None => {
            let c = closest.expect("grid is never empty");
            Err(Error::Infeasible {
                message: match target {
                    ThresholdTarget::CostBudget(b) => {
                        format!("no threshold setting has average cost <= {b}")
                    }
                    _ => format!("no threshold setting reaches mIoU >= {}", floor.unwrap()),
                },
                best_accuracy: c.miou,
                best_cost: c.avg_cost,
            })
        }
    }
}

/// Parameters of [`generate_synthetic_dense_pool`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSynthConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Costs of the weak and the strong model.
    pub costs: [f64; 2],
    /// Fraction of pixels carrying the ignore label.
    pub ignore_fraction: f64,
    pub seed: u64,
}

impl Default for DenseSynthConfig {
    fn default() -> Self {
        DenseSynthConfig {
            num_images: 4,
            height: 16,
            width: 16,
            num_classes: 3,
            costs: [1.0, 2.0],
            ignore_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Two-model dense pool in which the weak model is confidently right
/// everywhere except one quadrant per image, where it is wrong and
/// unconfident; the strong model is right everywhere. Labels come in 4x4
/// blocks. Ignored pixels get near-uniform logits from both models.
pub fn generate_synthetic_dense_pool(config: &DenseSynthConfig) -> Result<DensePool> {
    let DenseSynthConfig {
        num_images,
        height,
        width,
        num_classes: c,
        costs,
        ignore_fraction,
        seed,
    } = *config;
    if c < 2 || height % 2 != 0 || width % 2 != 0 || num_images == 0 {
        return Err(Error::invalid(
            "dense synth needs C >= 2, even H and W, and N >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = height * width;
    let mut labels = Vec::with_capacity(num_images * area);
    let mut weak = Vec::with_capacity(num_images * area * c);
    let mut strong = Vec::with_capacity(num_images * area * c);
    let ignore = DEFAULT_IGNORE_LABEL;
    for _ in 0..num_images {
        let blocks_w = width.div_ceil(4);
        let block_labels: Vec<u32> = (0..height.div_ceil(4) * blocks_w)
            .map(|_| rng.random_range(0..c as u32))
            .collect();
        let quadrant = rng.random_range(0..4usize);
        for y in 0..height {
            for x in 0..width {
                let label = block_labels[(y / 4) * blocks_w + x / 4];
                let q = usize::from(y >= height / 2) * 2 + usize::from(x >= width / 2);
                let ignored = rng.random::<f64>() < ignore_fraction;
                let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.1f32..0.1);
                let mut w = vec![0f32; c];
                let mut s = vec![0f32; c];
                for j in 0..c {
                    w[j] = jitter(&mut rng);
                    s[j] = jitter(&mut rng);
                }
                if ignored {
                    labels.push(ignore);
                } else {
                    labels.push(label);
                    s[label as usize] += 4.0;
                    if q == quadrant {
                        let wrong = (label as usize + 1) % c;
                        w[wrong] += 0.6;
                    } else {
                        w[label as usize] += 4.0;
                    }
                }
                weak.extend(w);
                strong.extend(s);
            }
        }
    }
    let labels = DenseLabelSet::new(labels, [height, width], ignore)?;
    DensePool::new(
        vec![
            DensePredictionSet::new("weak", "weak", weak, [height, width], c, costs[0])?,
            DensePredictionSet::new("strong", "strong", strong, [height, width], c, costs[1])?,
        ],
        labels,
    )
}
