//! Exit-threshold selection for a fixed model sequence.
//!
//! Candidate thresholds for each stage are percentiles of that stage's
//! aggregate confidence, computed over all examples as if every example
//! reached the stage, plus the two sentinels (everyone exits, nobody
//! exits). The search enumerates the product of the per-stage candidate
//! lists depth-first in lexicographic order.
//!
//! Pruning relies only on cost monotonicity: raising `t_k` keeps more
//! examples in the cascade, so once a partial assignment's cost lower bound
//! passes the budget (or the best cost found so far), every larger `t_k` can
//! be skipped. Accuracy is not monotone in the thresholds in general and is
//! never used to prune.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cascade::{AggregationMode, CascadeEvaluation, StagedPredictions};
use crate::confidence::ConfidenceMetric;
use crate::error::{Error, Result};
use crate::store::ModelPool;

pub const DEFAULT_GRID_RESOLUTION: usize = 100;

/// Default slack of [`ThresholdTarget::MatchEnsemble`]: 0.1 percentage points.
pub const DEFAULT_MATCH_SLACK: f64 = 0.001;

/// Sorted, deduplicated candidate thresholds for each of the first `n - 1`
/// stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub stages: Vec<Vec<f64>>,
}

impl ThresholdGrid {
    /// Grid for a prepared model sequence.
    ///
    /// Stage `k` gets the observed confidences at percentiles
    /// `100/g, 200/g, ..., 100` (nearest rank on the sorted scores) plus the
    /// metric's exit-all and never-exit sentinels. The 0th percentile is
    /// left out: it routes exactly like the exit-all sentinel.
    pub fn from_staged(staged: &StagedPredictions, grid_resolution: usize) -> Result<Self> {
        if grid_resolution < 2 {
            return Err(Error::invalid("grid resolution must be at least 2"));
        }
        let metric = staged.metric();
        let n = staged.num_examples();
        let stages = (0..staged.num_stages() - 1)
            .map(|k| {
                let mut sorted = staged.confidence(k).to_vec();
                sorted.sort_by(f64::total_cmp);
                let mut candidates = Vec::with_capacity(grid_resolution + 2);
                candidates.push(metric.exit_all_threshold());
                for j in 1..=grid_resolution {
                    let idx = (2 * j * (n - 1) + grid_resolution) / (2 * grid_resolution);
                    candidates.push(sorted[idx]);
                }
                candidates.push(metric.never_exit_threshold());
                candidates.sort_by(f64::total_cmp);
                candidates.dedup();
                candidates
            })
            .collect();
        Ok(ThresholdGrid { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Size of the full candidate product.
    pub fn num_points(&self) -> usize {
        self.stages.iter().map(Vec::len).product()
    }

    pub fn contains(&self, thresholds: &[f64]) -> bool {
        thresholds.len() == self.stages.len()
            && thresholds
                .iter()
                .zip(&self.stages)
                .all(|(t, list)| list.contains(t))
    }
}

/// Builds the percentile grid for a model sequence.
pub fn build_threshold_grid<S: AsRef<str>>(
    models: &[S],
    pool: &ModelPool,
    metric: ConfidenceMetric,
    aggregation: AggregationMode,
    grid_resolution: usize,
) -> Result<ThresholdGrid> {
    let staged = StagedPredictions::new(pool, models, metric, aggregation)?;
    ThresholdGrid::from_staged(&staged, grid_resolution)
}

/// What the threshold (or model) search optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ThresholdTarget {
    /// Maximize accuracy subject to average cost `<= beta`.
    CostBudget(f64),
    /// Minimize average cost subject to accuracy `>= gamma`.
    AccuracyFloor(f64),
    /// Minimize average cost subject to accuracy `>=` ensemble accuracy
    /// minus the slack.
    MatchEnsemble(f64),
}

impl ThresholdTarget {
    fn validate(self) -> Result<()> {
        match self {
            ThresholdTarget::CostBudget(b) if !(b > 0.0 && b.is_finite()) => {
                Err(Error::invalid(format!("cost budget {b} must be positive")))
            }
            ThresholdTarget::AccuracyFloor(g) if !(0.0..=1.0).contains(&g) => Err(Error::invalid(
                format!("accuracy floor {g} is outside [0, 1]"),
            )),
            ThresholdTarget::MatchEnsemble(e) if !(e >= 0.0 && e.is_finite()) => Err(
                Error::invalid(format!("ensemble slack {e} must be non-negative")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Goal {
    MaxAccuracy { budget: f64 },
    MinCost { floor: f64 },
}

impl Goal {
    pub(crate) fn resolve(target: ThresholdTarget, staged: &StagedPredictions) -> Result<Goal> {
        target.validate()?;
        Ok(match target {
            ThresholdTarget::CostBudget(budget) => Goal::MaxAccuracy { budget },
            ThresholdTarget::AccuracyFloor(floor) => Goal::MinCost { floor },
            ThresholdTarget::MatchEnsemble(slack) => {
                let ensemble = staged.ensemble_correct() as f64 / staged.num_examples() as f64;
                Goal::MinCost {
                    floor: ensemble - slack,
                }
            }
        })
    }
}

/// Slack added to cost bounds before pruning, so that rounding in the
/// lower bound never discards a point the full evaluation would accept.
fn prune_slack(bound: f64) -> f64 {
    1e-9 * bound.abs().max(1.0)
}

/// Selected thresholds and the cascade they produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub thresholds: Vec<f64>,
    pub evaluation: CascadeEvaluation,
    /// Complete threshold vectors evaluated (after pruning).
    pub points_evaluated: usize,
}

#[derive(Debug, Clone)]
struct Best {
    correct: usize,
    cost: f64,
    path: Vec<usize>,
}

struct Search<'a> {
    staged: &'a StagedPredictions,
    grid: &'a ThresholdGrid,
    goal: Goal,
    best: Option<Best>,
    /// Highest-accuracy point seen, for infeasibility diagnostics.
    closest: Option<(usize, f64)>,
    path: Vec<usize>,
    evaluated: usize,
}

impl Search<'_> {
    fn visit(&mut self, stage: usize, remaining: &[u32], correct_so_far: usize, partial: f64) {
        let n = self.staged.num_examples() as f64;
        let cum = self.staged.cum_costs();
        let last = self.staged.num_stages() - 1;
        if stage == last {
            let correct_here = self.staged.correct(last);
            let correct = correct_so_far
                + remaining
                    .iter()
                    .filter(|&&i| correct_here[i as usize])
                    .count();
            let cost = (partial + remaining.len() as f64 * cum[last]) / n;
            self.leaf(correct, cost);
            return;
        }

        let conf = self.staged.confidence(stage);
        let correct_here = self.staged.correct(stage);
        let mut sorted = remaining.to_vec();
        sorted.sort_by(|&a, &b| conf[b as usize].total_cmp(&conf[a as usize]));
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        prefix.push(0usize);
        for &i in &sorted {
            prefix.push(prefix.last().unwrap() + usize::from(correct_here[i as usize]));
        }

        let metric = self.staged.metric();
        for (j, &t) in self.grid.stages[stage].iter().enumerate() {
            let exited = if t < metric.never_exit_threshold() {
                sorted.partition_point(|&i| conf[i as usize] >= t)
            } else {
                0
            };
            let partial_here = partial + exited as f64 * cum[stage];
            let lower_bound = (partial_here + (sorted.len() - exited) as f64 * cum[stage + 1]) / n;
            let prune = match self.goal {
                Goal::MaxAccuracy { budget } => lower_bound > budget + prune_slack(budget),
                Goal::MinCost { .. } => self
                    .best
                    .as_ref()
                    .is_some_and(|b| lower_bound > b.cost + prune_slack(b.cost)),
            };
            if prune {
                break;
            }
            self.path.push(j);
            self.visit(
                stage + 1,
                &sorted[exited..],
                correct_so_far + prefix[exited],
                partial_here,
            );
            self.path.pop();
        }
    }

    fn leaf(&mut self, correct: usize, cost: f64) {
        self.evaluated += 1;
        let n = self.staged.num_examples() as f64;
        if self
            .closest
            .is_none_or(|(c, k)| correct > c || (correct == c && cost < k))
        {
            self.closest = Some((correct, cost));
        }
        let (feasible, better) = match (self.goal, &self.best) {
            (Goal::MaxAccuracy { budget }, best) => (
                cost <= budget,
                best.as_ref()
                    .is_none_or(|b| correct > b.correct || (correct == b.correct && cost < b.cost)),
            ),
            (Goal::MinCost { floor }, best) => (
                correct as f64 / n >= floor,
                best.as_ref()
                    .is_none_or(|b| cost < b.cost || (cost == b.cost && correct > b.correct)),
            ),
        };
        if feasible && better {
            self.best = Some(Best {
                correct,
                cost,
                path: self.path.clone(),
            });
        }
    }
}

/// Thresholds on `grid` that best meet `target` for an already prepared
/// model sequence.
///
/// Ties: for a cost budget, higher accuracy then lower cost; for an accuracy
/// floor, lower cost then higher accuracy; remaining ties go to the
/// lexicographically smallest threshold vector.
pub fn search_staged(
    staged: &StagedPredictions,
    grid: &ThresholdGrid,
    target: ThresholdTarget,
) -> Result<ThresholdSearch> {
    if grid.num_stages() != staged.num_stages() - 1 {
        return Err(Error::ThresholdCount {
            expected: staged.num_stages() - 1,
            actual: grid.num_stages(),
        });
    }
    let goal = Goal::resolve(target, staged)?;
    let n = staged.num_examples();
    let mut search = Search {
        staged,
        grid,
        goal,
        best: None,
        closest: None,
        path: Vec::with_capacity(grid.num_stages()),
        evaluated: 0,
    };
    let all: Vec<u32> = (0..n as u32).collect();
    search.visit(0, &all, 0, 0.0);

    let Some(best) = search.best else {
        let (best_accuracy, best_cost, message) = match goal {
            Goal::MaxAccuracy { budget } => {
                let correct = staged.correct(0).iter().filter(|&&c| c).count();
                (
                    correct as f64 / n as f64,
                    staged.cum_costs()[0],
                    format!("no threshold setting has average cost <= {budget}"),
                )
            }
            Goal::MinCost { floor } => {
                let (correct, cost) = search.closest.expect("at least one grid point");
                (
                    correct as f64 / n as f64,
                    cost,
                    format!("no threshold setting reaches accuracy >= {floor}"),
                )
            }
        };
        return Err(Error::Infeasible {
            message,
            best_accuracy,
            best_cost,
        });
    };
    let thresholds: Vec<f64> = best
        .path
        .iter()
        .enumerate()
        .map(|(k, &j)| grid.stages[k][j])
        .collect();
    let evaluation = staged.evaluate(&thresholds)?;
    debug_assert_eq!(evaluation.num_correct, best.correct);
    debug_assert_eq!(evaluation.avg_cost, best.cost);
    Ok(ThresholdSearch {
        thresholds,
        evaluation,
        points_evaluated: search.evaluated,
    })
}

/// Searches thresholds for a fixed model sequence. `grid` must come from
/// [`build_threshold_grid`] (or otherwise have one list per thresholded
/// stage).
pub fn search_thresholds<S: AsRef<str>>(
    models: &[S],
    pool: &ModelPool,
    target: ThresholdTarget,
    metric: ConfidenceMetric,
    aggregation: AggregationMode,
    grid: &ThresholdGrid,
) -> Result<ThresholdSearch> {
    let staged = StagedPredictions::new(pool, models, metric, aggregation)?;
    search_staged(&staged, grid, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t: f64,
    pub accuracy: f64,
    pub avg_cost: f64,
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "accuracy", "avg_cost"])?;
    for p in points {
        w.write_record([
            p.t.to_string(),
            p.accuracy.to_string(),
            p.avg_cost.to_string(),
        ])?;
    }
    w.flush()
}

/// Evaluates every grid candidate for threshold `stage` (1-based), holding
/// the other thresholds at `fixed`. An empty `fixed` holds them at the
/// never-exit ceiling.
pub fn threshold_sweep<S: AsRef<str>>(
    models: &[S],
    pool: &ModelPool,
    metric: ConfidenceMetric,
    aggregation: AggregationMode,
    stage: usize,
    grid: &ThresholdGrid,
    fixed: &[f64],
) -> Result<Vec<SweepPoint>> {
    let staged = StagedPredictions::new(pool, models, metric, aggregation)?;
    let thresholded = staged.num_stages() - 1;
    if stage == 0 || stage > thresholded {
        return Err(Error::invalid(format!(
            "stage {stage} is outside 1..={thresholded}"
        )));
    }
    if grid.num_stages() != thresholded {
        return Err(Error::ThresholdCount {
            expected: thresholded,
            actual: grid.num_stages(),
        });
    }
    let mut thresholds = if fixed.is_empty() {
        vec![metric.never_exit_threshold(); thresholded]
    } else if fixed.len() == thresholded {
        fixed.to_vec()
    } else {
        return Err(Error::ThresholdCount {
            expected: thresholded,
            actual: fixed.len(),
        });
    };
    grid.stages[stage - 1]
        .iter()
        .map(|&t| {
            thresholds[stage - 1] = t;
            let eval = staged.evaluate(&thresholds)?;
            Ok(SweepPoint {
                t,
                accuracy: eval.accuracy,
                avg_cost: eval.avg_cost,
            })
        })
        .collect()
}
