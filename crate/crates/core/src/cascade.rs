//! Ensembles and confidence-gated cascades over a model pool.
//!
//! A cascade applies its models one at a time. After stage `k` the
//! aggregate prediction is the running mean of the first `k` models'
//! logits (or probabilities); the example exits as soon as the aggregate's
//! confidence reaches the stage threshold, and always exits after the last
//! stage. An ensemble is the cascade in which nobody exits early.
//!
//! Average cost is always accumulated from per-stage exit counts in stage
//! order, `sum_k count_k * cumulative_cost_k / N`, so every code path that
//! reports a cost for the same routing produces the same `f64`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::confidence::{argmax, softmax_into, ConfidenceMetric};
use crate::error::{Error, Result};
use crate::par;
use crate::store::ModelPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    MeanLogits,
    MeanProbs,
}

impl AggregationMode {
    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::MeanLogits => "mean_logits",
            AggregationMode::MeanProbs => "mean_probs",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mean_logits" | "logits" => Ok(AggregationMode::MeanLogits),
            "mean_probs" | "probs" => Ok(AggregationMode::MeanProbs),
            _ => Err(Error::invalid(format!("unknown aggregation mode `{s}`"))),
        }
    }
}

/// Ordered models, `n - 1` exit thresholds, and how to score and combine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub models: Vec<String>,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub metric: ConfidenceMetric,
    #[serde(default)]
    pub aggregation: AggregationMode,
}

impl CascadeSpec {
    pub fn new<S: Into<String>>(models: impl IntoIterator<Item = S>, thresholds: Vec<f64>) -> Self {
        CascadeSpec {
            models: models.into_iter().map(Into::into).collect(),
            thresholds,
            metric: ConfidenceMetric::default(),
            aggregation: AggregationMode::default(),
        }
    }

    /// All thresholds at the never-exit ceiling.
    pub fn ensemble<S: Into<String>>(
        models: impl IntoIterator<Item = S>,
        metric: ConfidenceMetric,
        aggregation: AggregationMode,
    ) -> Self {
        let models: Vec<String> = models.into_iter().map(Into::into).collect();
        let thresholds = vec![metric.never_exit_threshold(); models.len().saturating_sub(1)];
        CascadeSpec {
            models,
            thresholds,
            metric,
            aggregation,
        }
    }

    pub fn with_metric(mut self, metric: ConfidenceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_aggregation(mut self, aggregation: AggregationMode) -> Self {
        self.aggregation = aggregation;
        self
    }

    /// `B3+B5+B5`-style name.
    pub fn notation(&self) -> String {
        self.models.join("+")
    }

    fn resolve(&self, pool: &ModelPool) -> Result<Vec<usize>> {
        if self.models.is_empty() {
            return Err(Error::invalid("a cascade needs at least one model"));
        }
        if self.thresholds.len() != self.models.len() - 1 {
            return Err(Error::ThresholdCount {
                expected: self.models.len() - 1,
                actual: self.thresholds.len(),
            });
        }
        if let Some(t) = self.thresholds.iter().find(|t| t.is_nan()) {
            return Err(Error::invalid(format!("threshold {t} is not a number")));
        }
        resolve_ids(pool, &self.models)
    }
}

pub(crate) fn resolve_ids<S: AsRef<str>>(pool: &ModelPool, ids: &[S]) -> Result<Vec<usize>> {
    let mut indices = Vec::with_capacity(ids.len());
    for id in ids {
        let idx = pool.index_of(id.as_ref())?;
        if indices.contains(&idx) {
            return Err(Error::RepeatedModel(id.as_ref().to_string()));
        }
        indices.push(idx);
    }
    Ok(indices)
}

/// Outcome of running a cascade over every example of a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeEvaluation {
    pub accuracy: f64,
    pub num_correct: usize,
    pub num_examples: usize,
    /// Mean over examples of the cumulative cost at exit.
    pub avg_cost: f64,
    /// Sum of all stage costs.
    pub worst_case_cost: f64,
    pub exit_ratios: Vec<f64>,
    pub exit_counts: Vec<usize>,
    /// 1-based stage at which each example exited.
    pub exit_stage: Vec<u32>,
    pub predicted_labels: Vec<u32>,
    pub exit_confidence: Vec<f64>,
}

impl CascadeEvaluation {
    /// Per-example trace as CSV:
    /// `example,exit_stage,predicted,label,confidence_at_exit`.
    pub fn write_trace<W: Write>(&self, labels: &[u32], out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "example",
            "exit_stage",
            "predicted",
            "label",
            "confidence_at_exit",
        ])?;
        for i in 0..self.num_examples {
            w.write_record([
                i.to_string(),
                self.exit_stage[i].to_string(),
                self.predicted_labels[i].to_string(),
                labels[i].to_string(),
                self.exit_confidence[i].to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Summary written as the JSON evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub accuracy: f64,
    pub avg_cost: f64,
    pub worst_case_cost: f64,
    pub exit_ratios: Vec<f64>,
    pub n: usize,
    pub model_ids: Vec<String>,
    pub thresholds: Vec<f64>,
    pub metric: ConfidenceMetric,
    pub aggregation: AggregationMode,
}

impl CascadeReport {
    pub fn new(spec: &CascadeSpec, eval: &CascadeEvaluation) -> Self {
        CascadeReport {
            accuracy: eval.accuracy,
            avg_cost: eval.avg_cost,
            worst_case_cost: eval.worst_case_cost,
            exit_ratios: eval.exit_ratios.clone(),
            n: spec.models.len(),
            model_ids: spec.models.clone(),
            thresholds: spec.thresholds.clone(),
            metric: spec.metric,
            aggregation: spec.aggregation,
        }
    }
}

pub(crate) fn avg_cost_from_counts(
    counts: &[usize],
    cum_costs: &[f64],
    num_examples: usize,
) -> f64 {
    let total = counts
        .iter()
        .zip(cum_costs)
        .fold(0.0, |acc, (&count, &cum)| acc + count as f64 * cum);
    total / num_examples as f64
}

/// Per-stage aggregate predictions of a fixed model sequence.
///
/// The aggregate after stage `k` does not depend on thresholds, so it is
/// computed once for every example; evaluating a threshold vector is then
/// only a routing pass.
#[derive(Debug, Clone)]
pub struct StagedPredictions {
    metric: ConfidenceMetric,
    num_examples: usize,
    confidence: Vec<Vec<f64>>,
    predicted: Vec<Vec<u32>>,
    correct: Vec<Vec<bool>>,
    cum_costs: Vec<f64>,
}

impl StagedPredictions {
    pub fn new(
        pool: &ModelPool,
        model_ids: &[impl AsRef<str>],
        metric: ConfidenceMetric,
        aggregation: AggregationMode,
    ) -> Result<Self> {
        if model_ids.is_empty() {
            return Err(Error::invalid("a cascade needs at least one model"));
        }
        let indices = resolve_ids(pool, model_ids)?;
        Self::from_indices(pool, &indices, metric, aggregation)
    }

    pub(crate) fn from_indices(
        pool: &ModelPool,
        indices: &[usize],
        metric: ConfidenceMetric,
        aggregation: AggregationMode,
    ) -> Result<Self> {
        let c = pool.num_classes();
        if c < 2
            && matches!(
                metric,
                ConfidenceMetric::LogitGap | ConfidenceMetric::ProbGap
            )
        {
            return Err(Error::invalid(format!(
                "{metric} needs at least two classes"
            )));
        }
        let n = pool.num_examples();
        let stages = indices.len();
        let entries: Vec<_> = indices.iter().map(|&i| &pool.entries()[i]).collect();
        let per_example: Vec<Vec<(f64, u32)>> = par::map_indexed(n, |i| {
            let mut sum = vec![0f64; c];
            let mut agg = vec![0f64; c];
            let mut probs = Vec::with_capacity(c);
            let mut out = Vec::with_capacity(stages);
            for (k, entry) in entries.iter().enumerate() {
                let row = entry.row(i);
                match aggregation {
                    AggregationMode::MeanLogits => {
                        for (s, &v) in sum.iter_mut().zip(row) {
                            *s += f64::from(v);
                        }
                    }
                    AggregationMode::MeanProbs => {
                        softmax_into(row, &mut probs);
                        for (s, &p) in sum.iter_mut().zip(&probs) {
                            *s += p;
                        }
                    }
                }
                let count = (k + 1) as f64;
                for (a, &s) in agg.iter_mut().zip(&sum) {
                    *a = s / count;
                }
                let score = match aggregation {
                    AggregationMode::MeanLogits => metric.score_logits(&agg),
                    AggregationMode::MeanProbs => metric.score_probs(&agg),
                };
                out.push((score, argmax(&agg) as u32));
            }
            out
        });

        let labels = &pool.labels().labels;
        let mut confidence = vec![Vec::with_capacity(n); stages];
        let mut predicted = vec![Vec::with_capacity(n); stages];
        let mut correct = vec![Vec::with_capacity(n); stages];
        for (i, stages_out) in per_example.into_iter().enumerate() {
            for (k, (score, pred)) in stages_out.into_iter().enumerate() {
                confidence[k].push(score);
                predicted[k].push(pred);
                correct[k].push(pred == labels[i]);
            }
        }
        let mut cum_costs = Vec::with_capacity(stages);
        let mut running = 0.0;
        for e in &entries {
            running += e.cost;
            cum_costs.push(running);
        }
        Ok(StagedPredictions {
            metric,
            num_examples: n,
            confidence,
            predicted,
            correct,
            cum_costs,
        })
    }

    pub fn metric(&self) -> ConfidenceMetric {
        self.metric
    }

    pub fn num_stages(&self) -> usize {
        self.cum_costs.len()
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    /// Aggregate confidence of every example after `stage` (0-based), as if
    /// all examples reached it.
    pub fn confidence(&self, stage: usize) -> &[f64] {
        &self.confidence[stage]
    }

    pub fn correct(&self, stage: usize) -> &[bool] {
        &self.correct[stage]
    }

    pub fn cum_costs(&self) -> &[f64] {
        &self.cum_costs
    }

    pub fn worst_case_cost(&self) -> f64 {
        *self.cum_costs.last().expect("at least one stage")
    }

    /// Correct count of the full ensemble (last stage, no early exit).
    pub fn ensemble_correct(&self) -> usize {
        self.correct[self.num_stages() - 1]
            .iter()
            .filter(|&&c| c)
            .count()
    }

    pub(crate) fn avg_cost(&self, counts: &[usize]) -> f64 {
        avg_cost_from_counts(counts, &self.cum_costs, self.num_examples)
    }

    /// Routes every example through the cascade with the given thresholds.
    pub fn evaluate(&self, thresholds: &[f64]) -> Result<CascadeEvaluation> {
        let stages = self.num_stages();
        if thresholds.len() != stages - 1 {
            return Err(Error::ThresholdCount {
                expected: stages - 1,
                actual: thresholds.len(),
            });
        }
        let n = self.num_examples;
        let mut exit_counts = vec![0usize; stages];
        let mut exit_stage = Vec::with_capacity(n);
        let mut predicted_labels = Vec::with_capacity(n);
        let mut exit_confidence = Vec::with_capacity(n);
        let mut num_correct = 0;
        for i in 0..n {
            let stage = thresholds
                .iter()
                .enumerate()
                .find(|&(k, &t)| self.metric.exits(self.confidence[k][i], t))
                .map_or(stages - 1, |(k, _)| k);
            exit_counts[stage] += 1;
            exit_stage.push(stage as u32 + 1);
            predicted_labels.push(self.predicted[stage][i]);
            exit_confidence.push(self.confidence[stage][i]);
            num_correct += usize::from(self.correct[stage][i]);
        }
        Ok(CascadeEvaluation {
            accuracy: num_correct as f64 / n as f64,
            num_correct,
            num_examples: n,
            avg_cost: self.avg_cost(&exit_counts),
            worst_case_cost: self.worst_case_cost(),
            exit_ratios: exit_counts.iter().map(|&c| c as f64 / n as f64).collect(),
            exit_counts,
            exit_stage,
            predicted_labels,
            exit_confidence,
        })
    }
}

/// Runs a cascade over all examples of the pool.
pub fn evaluate_cascade(spec: &CascadeSpec, pool: &ModelPool) -> Result<CascadeEvaluation> {
    let indices = spec.resolve(pool)?;
    StagedPredictions::from_indices(pool, &indices, spec.metric, spec.aggregation)?
        .evaluate(&spec.thresholds)
}

/// Evaluates the ensemble of the given models: every model runs on every
/// example and the prediction is the argmax of the aggregate.
pub fn evaluate_ensemble<S: AsRef<str>>(
    model_ids: &[S],
    pool: &ModelPool,
    aggregation: AggregationMode,
) -> Result<CascadeEvaluation> {
    let spec = CascadeSpec::ensemble(
        model_ids.iter().map(|s| s.as_ref().to_string()),
        ConfidenceMetric::default(),
        aggregation,
    );
    evaluate_cascade(&spec, pool)
}

/// Average cost implied by per-stage exit ratios:
/// `sum_k ratio_k * (cost_1 + ... + cost_k)`.
pub fn cost_from_exit_ratios(costs: &[f64], exit_ratios: &[f64]) -> Result<f64> {
    if costs.len() != exit_ratios.len() || costs.is_empty() {
        return Err(Error::invalid(format!(
            "{} costs but {} exit ratios",
            costs.len(),
            exit_ratios.len()
        )));
    }
    let total: f64 = exit_ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 || exit_ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::invalid(format!(
            "exit ratios sum to {total}, expected 1"
        )));
    }
    let mut cumulative = 0.0;
    let mut avg = 0.0;
    for (&cost, &ratio) in costs.iter().zip(exit_ratios) {
        cumulative += cost;
        avg += ratio * cumulative;
    }
    Ok(avg)
}
