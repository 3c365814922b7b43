//! Choosing which models form a cascade.
//!
//! Candidates are ordered tuples of model types. A type used `r` times in a
//! tuple takes its replicates in ascending `replicate_index` order by
//! position, so interchangeable replicates are not counted twice. Every
//! candidate gets its own threshold search; the best candidate under a
//! total order wins, which keeps the result independent of scheduling.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cascade::{AggregationMode, CascadeEvaluation, CascadeSpec, StagedPredictions};
use crate::confidence::ConfidenceMetric;
use crate::error::{Error, Result};
use crate::par;
use crate::store::ModelPool;
use crate::thresholds::{search_staged, ThresholdGrid, ThresholdTarget, DEFAULT_GRID_RESOLUTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Every ordered tuple.
    #[default]
    AllOrders,
    /// Only tuples whose per-model costs never decrease.
    NonDecreasingCost,
}

impl std::str::FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "all_orders" | "all" => Ok(OrderPolicy::AllOrders),
            "non_decreasing_cost" | "non_decreasing" => Ok(OrderPolicy::NonDecreasingCost),
            _ => Err(Error::invalid(format!("unknown order policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Objective {
    /// Maximize accuracy with average cost at most the given budget.
    MaxAccuracy(f64),
    /// Minimize average cost with accuracy at least the given floor.
    MinCost(f64),
}

impl Objective {
    fn target(self) -> ThresholdTarget {
        match self {
            Objective::MaxAccuracy(budget) => ThresholdTarget::CostBudget(budget),
            Objective::MinCost(floor) => ThresholdTarget::AccuracyFloor(floor),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionProblem<'a> {
    pub pool: &'a ModelPool,
    /// Longest cascade considered.
    pub max_models: usize,
    pub objective: Objective,
    /// Upper bound on the sum of all stage costs.
    pub worst_case_bound: Option<f64>,
    pub metric: ConfidenceMetric,
    pub aggregation: AggregationMode,
    pub grid_resolution: usize,
    pub order_policy: OrderPolicy,
}

impl<'a> SelectionProblem<'a> {
    pub fn new(pool: &'a ModelPool, objective: Objective) -> Self {
        SelectionProblem {
            pool,
            max_models: 4,
            objective,
            worst_case_bound: None,
            metric: ConfidenceMetric::default(),
            aggregation: AggregationMode::default(),
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            order_policy: OrderPolicy::default(),
        }
    }

    pub fn max_models(mut self, n: usize) -> Self {
        self.max_models = n;
        self
    }

    pub fn worst_case_bound(mut self, bound: f64) -> Self {
        self.worst_case_bound = Some(bound);
        self
    }

    pub fn metric(mut self, metric: ConfidenceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn aggregation(mut self, aggregation: AggregationMode) -> Self {
        self.aggregation = aggregation;
        self
    }

    pub fn grid_resolution(mut self, resolution: usize) -> Self {
        self.grid_resolution = resolution;
        self
    }

    pub fn order_policy(mut self, policy: OrderPolicy) -> Self {
        self.order_policy = policy;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.max_models == 0 {
            return Err(Error::invalid("max_models must be at least 1"));
        }
        if let Some(b) = self.worst_case_bound {
            if !(b > 0.0) {
                return Err(Error::invalid(format!(
                    "worst-case bound {b} must be positive"
                )));
            }
        }
        Ok(())
    }

    fn within_worst_case(&self, entries: &[usize]) -> bool {
        let total: f64 = entries.iter().map(|&i| self.pool.entries()[i].cost).sum();
        self.worst_case_bound.is_none_or(|b| total <= b)
    }
}

/// Candidate tuples of length `2..=max_models` as pool entry indices, with
/// counts of tuples dropped by each filter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Candidates {
    pub tuples: Vec<Vec<usize>>,
    /// Tuples needing more replicates of a type than the pool holds.
    pub skipped_replicates: usize,
    /// Tuples rejected by [`OrderPolicy::NonDecreasingCost`].
    pub skipped_order: usize,
    /// Tuples whose total cost exceeds the worst-case bound.
    pub skipped_worst_case: usize,
}

/// Model types of the pool, in sorted order, each with its entries sorted
/// by replicate index. Entries at different resolutions are different types.
fn model_types(pool: &ModelPool) -> Vec<Vec<usize>> {
    let mut types: BTreeMap<(&str, Option<u32>), Vec<usize>> = BTreeMap::new();
    for (i, e) in pool.entries().iter().enumerate() {
        types
            .entry((e.model_type.as_str(), e.resolution))
            .or_default()
            .push(i);
    }
    types
        .into_values()
        .map(|mut v| {
            v.sort_by_key(|&i| pool.entries()[i].replicate_index);
            v
        })
        .collect()
}

/// Enumerates ordered tuples of model types of length 2 to `max_models`.
///
/// With `t` types and enough replicates this yields `t^2 + ... + t^max`
/// tuples before filtering.
pub fn enumerate_candidates(problem: &SelectionProblem<'_>) -> Candidates {
    let pool = problem.pool;
    let types = model_types(pool);
    let mut out = Candidates::default();
    if types.is_empty() {
        return out;
    }
    for len in 2..=problem.max_models {
        let mut digits = vec![0usize; len];
        'tuples: loop {
            let mut used = vec![0usize; types.len()];
            let mut entries = Vec::with_capacity(len);
            let mut available = true;
            for &t in &digits {
                match types[t].get(used[t]) {
                    Some(&e) => entries.push(e),
                    None => available = false,
                }
                used[t] += 1;
            }
            if !available {
                out.skipped_replicates += 1;
            } else if problem.order_policy == OrderPolicy::NonDecreasingCost
                && entries
                    .windows(2)
                    .any(|w| pool.entries()[w[1]].cost < pool.entries()[w[0]].cost)
            {
                out.skipped_order += 1;
            } else if !problem.within_worst_case(&entries) {
                out.skipped_worst_case += 1;
            } else {
                out.tuples.push(entries);
            }

            let mut pos = len;
            loop {
                if pos == 0 {
                    break 'tuples;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < types.len() {
                    break;
                }
                digits[pos] = 0;
            }
        }
    }
    out
}

/// Result of [`select_cascade`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub spec: CascadeSpec,
    pub evaluation: CascadeEvaluation,
    /// Candidates searched, solitary models included.
    pub candidates_searched: usize,
    pub candidates_feasible: usize,
}

struct Scored {
    entries: Vec<usize>,
    ids: Vec<String>,
    thresholds: Vec<f64>,
    correct: usize,
    avg_cost: f64,
    worst_case_cost: f64,
}

fn compare(objective: Objective, a: &Scored, b: &Scored) -> Ordering {
    // `Less` means `a` is preferred.
    let primary = match objective {
        Objective::MaxAccuracy(_) => b
            .correct
            .cmp(&a.correct)
            .then(a.avg_cost.total_cmp(&b.avg_cost)),
        Objective::MinCost(_) => a
            .avg_cost
            .total_cmp(&b.avg_cost)
            .then(b.correct.cmp(&a.correct)),
    };
    primary
        .then(a.entries.len().cmp(&b.entries.len()))
        .then(a.worst_case_cost.total_cmp(&b.worst_case_cost))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Exhaustive model selection: every solitary model and every enumerated
/// tuple gets a threshold search for the objective; the best feasible one
/// is returned.
///
/// Preference order: objective (accuracy for a budget, cost for a floor),
/// then the other quantity, then fewer models, lower worst-case cost and
/// lexicographically smaller model ids.
/// Solitary models within the worst-case bound, then enumerated tuples.
fn all_candidates(problem: &SelectionProblem<'_>) -> Vec<Vec<usize>> {
    let mut candidates: Vec<Vec<usize>> = (0..problem.pool.entries().len())
        .map(|i| vec![i])
        .filter(|e| problem.within_worst_case(e))
        .collect();
    candidates.extend(enumerate_candidates(problem).tuples);
    candidates
}

pub fn select_cascade(problem: &SelectionProblem<'_>) -> Result<Selection> {
    problem.validate()?;
    let pool = problem.pool;
    let candidates = all_candidates(problem);
    if candidates.is_empty() {
        let cheapest = pool
            .entries()
            .iter()
            .map(|e| e.cost)
            .fold(f64::INFINITY, f64::min);
        return Err(Error::Infeasible {
            message: format!(
                "no model combination fits the worst-case bound {}",
                problem.worst_case_bound.unwrap_or(f64::INFINITY)
            ),
            best_accuracy: 0.0,
            best_cost: cheapest,
        });
    }

    let target = problem.objective.target();
    let outcomes: Vec<Result<Scored>> = par::map_indexed(candidates.len(), |c| {
        let entries = &candidates[c];
        let staged =
            StagedPredictions::from_indices(pool, entries, problem.metric, problem.aggregation)?;
        let grid = ThresholdGrid::from_staged(&staged, problem.grid_resolution)?;
        let found = search_staged(&staged, &grid, target)?;
        Ok(Scored {
            ids: entries
                .iter()
                .map(|&i| pool.entries()[i].model_id.clone())
                .collect(),
            entries: entries.clone(),
            thresholds: found.thresholds,
            correct: found.evaluation.num_correct,
            avg_cost: found.evaluation.avg_cost,
            worst_case_cost: found.evaluation.worst_case_cost,
        })
    });

    let mut best: Option<Scored> = None;
    let mut feasible = 0;
    let mut nearest: Option<(f64, f64)> = None;
    for outcome in outcomes {
        match outcome {
            Ok(scored) => {
                feasible += 1;
                if best
                    .as_ref()
                    .is_none_or(|b| compare(problem.objective, &scored, b) == Ordering::Less)
                {
                    best = Some(scored);
                }
            }
            Err(Error::Infeasible {
                best_accuracy,
                best_cost,
                ..
            }) => {
                let closer = nearest.is_none_or(|(acc, cost)| match problem.objective {
                    Objective::MaxAccuracy(_) => best_cost < cost,
                    Objective::MinCost(_) => best_accuracy > acc,
                });
                if closer {
                    nearest = Some((best_accuracy, best_cost));
                }
            }
            Err(e) => return Err(e),
        }
    }

    let Some(best) = best else {
        let (best_accuracy, best_cost) = nearest.expect("every candidate was infeasible");
        return Err(Error::Infeasible {
            message: match problem.objective {
                Objective::MaxAccuracy(b) => format!("no cascade has average cost <= {b}"),
                Objective::MinCost(g) => format!("no cascade reaches accuracy >= {g}"),
            },
            best_accuracy,
            best_cost,
        });
    };
    let spec = CascadeSpec {
        models: best.ids,
        thresholds: best.thresholds,
        metric: problem.metric,
        aggregation: problem.aggregation,
    };
    let evaluation =
        StagedPredictions::from_indices(pool, &best.entries, problem.metric, problem.aggregation)?
            .evaluate(&spec.thresholds)?;
    Ok(Selection {
        spec,
        evaluation,
        candidates_searched: candidates.len(),
        candidates_feasible: feasible,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub spec: CascadeSpec,
    pub evaluation: CascadeEvaluation,
}

/// Non-dominated `(avg_cost, accuracy)` points, sorted by cost; accuracy
/// strictly increases along the frontier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub points: Vec<FrontierPoint>,
}

impl ParetoFrontier {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV with header `avg_cost,accuracy,worst_case_cost,models,thresholds`;
    /// models are `+`-joined and thresholds `;`-joined.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "avg_cost",
            "accuracy",
            "worst_case_cost",
            "models",
            "thresholds",
        ])?;
        for p in &self.points {
            let thresholds: Vec<String> = p.spec.thresholds.iter().map(f64::to_string).collect();
            w.write_record([
                p.evaluation.avg_cost.to_string(),
                p.evaluation.accuracy.to_string(),
                p.evaluation.worst_case_cost.to_string(),
                p.spec.notation(),
                thresholds.join(";"),
            ])?;
        }
        w.flush()
    }
}

fn spec_order(a: &CascadeSpec, b: &CascadeSpec) -> Ordering {
    a.models.cmp(&b.models).then_with(|| {
        a.thresholds
            .iter()
            .zip(&b.thresholds)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(a.thresholds.len().cmp(&b.thresholds.len()))
    })
}

/// Keeps exactly the non-dominated evaluations. Among identical
/// `(cost, accuracy)` points the lexicographically smallest spec survives.
pub fn pareto_frontier(evaluations: Vec<(CascadeSpec, CascadeEvaluation)>) -> ParetoFrontier {
    let mut all = evaluations;
    all.sort_by(|(sa, ea), (sb, eb)| {
        ea.avg_cost
            .total_cmp(&eb.avg_cost)
            .then(eb.accuracy.total_cmp(&ea.accuracy))
            .then_with(|| spec_order(sa, sb))
    });
    let mut points: Vec<FrontierPoint> = Vec::new();
    for (spec, evaluation) in all {
        if points
            .last()
            .is_none_or(|p| evaluation.accuracy > p.evaluation.accuracy)
        {
            points.push(FrontierPoint { spec, evaluation });
        }
    }
    ParetoFrontier { points }
}

/// Frontier over every candidate of `problem` (solitary models included)
/// at every point of its threshold grid. The objective is not used.
///
/// A candidate of `n` models contributes `(g + 2)^(n - 1)` points for grid
/// resolution `g`, so keep both small.
pub fn search_frontier(problem: &SelectionProblem<'_>) -> Result<ParetoFrontier> {
    problem.validate()?;
    let pool = problem.pool;
    let candidates = all_candidates(problem);
    let local: Vec<Result<ParetoFrontier>> = par::map_indexed(candidates.len(), |c| {
        let entries = &candidates[c];
        let staged =
            StagedPredictions::from_indices(pool, entries, problem.metric, problem.aggregation)?;
        let grid = ThresholdGrid::from_staged(&staged, problem.grid_resolution)?;
        let ids: Vec<String> = entries
            .iter()
            .map(|&i| pool.entries()[i].model_id.clone())
            .collect();
        let mut evaluations = Vec::new();
        let mut odometer = vec![0usize; grid.num_stages()];
        loop {
            let thresholds: Vec<f64> = odometer
                .iter()
                .enumerate()
                .map(|(k, &j)| grid.stages[k][j])
                .collect();
            let evaluation = staged.evaluate(&thresholds)?;
            let spec = CascadeSpec {
                models: ids.clone(),
                thresholds,
                metric: problem.metric,
                aggregation: problem.aggregation,
            };
            evaluations.push((spec, evaluation));
            let Some(k) = (0..odometer.len())
                .rev()
                .find(|&k| odometer[k] + 1 < grid.stages[k].len())
            else {
                break;
            };
            odometer[k] += 1;
            odometer[k + 1..].iter_mut().for_each(|j| *j = 0);
        }
        Ok(pareto_frontier(evaluations))
    });
    let mut merged = Vec::new();
    for frontier in local {
        merged.extend(frontier?.points.into_iter().map(|p| (p.spec, p.evaluation)));
    }
    Ok(pareto_frontier(merged))
}

/// A two-stage cascade of one model at a low and a high input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCascade {
    pub spec: CascadeSpec,
    pub evaluation: CascadeEvaluation,
    /// Cost of the high-resolution model alone divided by the cascade's
    /// average cost.
    pub speedup: f64,
}

/// Builds a self-cascade from two entries of the same model type at
/// different resolutions and picks its threshold for `target`.
pub fn assemble_self_cascade(
    pool: &ModelPool,
    low_id: &str,
    high_id: &str,
    target: ThresholdTarget,
    metric: ConfidenceMetric,
    aggregation: AggregationMode,
    grid_resolution: usize,
) -> Result<SelfCascade> {
    let low = pool.entry(low_id)?;
    let high = pool.entry(high_id)?;
    if low.model_type != high.model_type {
        return Err(Error::invalid(format!(
            "self-cascade needs one model type, got `{}` and `{}`",
            low.model_type, high.model_type
        )));
    }
    let (Some(low_res), Some(high_res)) = (low.resolution, high.resolution) else {
        return Err(Error::invalid(
            "self-cascade entries need resolution metadata",
        ));
    };
    if low_res >= high_res {
        return Err(Error::invalid(format!(
            "low resolution {low_res} is not below high resolution {high_res}"
        )));
    }
    if low.cost >= high.cost {
        return Err(Error::invalid(format!(
            "low-resolution cost {} is not below high-resolution cost {}",
            low.cost, high.cost
        )));
    }
    let ids = [low_id, high_id];
    let staged = StagedPredictions::new(pool, &ids, metric, aggregation)?;
    let grid = ThresholdGrid::from_staged(&staged, grid_resolution)?;
    let found = search_staged(&staged, &grid, target)?;
    let spec = CascadeSpec::new(ids, found.thresholds)
        .with_metric(metric)
        .with_aggregation(aggregation);
    Ok(SelfCascade {
        speedup: speedup(high.cost, found.evaluation.avg_cost),
        spec,
        evaluation: found.evaluation,
    })
}

/// `reference_cost / cost`.
pub fn speedup(reference_cost: f64, cost: f64) -> f64 {
    reference_cost / cost
}
