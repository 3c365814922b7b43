//! Synthetic-pool demos behind a static page. Each exported function builds
//! a pool from the page's slider values and returns JSON for plotting.

use committee::thresholds::threshold_sweep;
use committee::{
    build_threshold_grid, evaluate_ensemble, generate_synthetic_pool, search_frontier,
    search_thresholds, selective_accuracy, AggregationMode, ConfidenceMetric, Objective, Result,
    SelectionProblem, SynthConfig, ThresholdTarget,
};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const CLASSES: usize = 10;

/// Stage-1 threshold sweep of a two-model cascade, with the two models,
/// their ensemble and the cheapest ensemble-matching cascade marked.
pub fn sweep_data(
    examples: usize,
    accuracies: [f64; 2],
    costs: [f64; 2],
    correlation: f64,
    seed: u64,
) -> Result<Value> {
    let pool = generate_synthetic_pool(
        &SynthConfig::new(examples, CLASSES, accuracies.to_vec(), costs.to_vec())
            .correlation(correlation)
            .seed(seed),
    )?;
    let ids = ["m0", "m1"];
    let (metric, agg) = (ConfidenceMetric::MaxProb, AggregationMode::MeanLogits);
    let grid = build_threshold_grid(&ids, &pool, metric, agg, 50)?;
    let points = threshold_sweep(&ids, &pool, metric, agg, 1, &grid, &[])?;
    let ensemble = evaluate_ensemble(&ids, &pool, agg)?;
    let matched = search_thresholds(
        &ids,
        &pool,
        ThresholdTarget::MatchEnsemble(0.0),
        metric,
        agg,
        &grid,
    )?;
    let models: Vec<Value> = pool
        .entries()
        .iter()
        .map(|e| json!({ "id": e.model_id, "accuracy": e.accuracy(pool.labels()), "avg_cost": e.cost }))
        .collect();
    Ok(json!({
        "points": points,
        "models": models,
        "ensemble": { "accuracy": ensemble.accuracy, "avg_cost": ensemble.avg_cost },
        "matched": {
            "threshold": matched.thresholds[0],
            "accuracy": matched.evaluation.accuracy,
            "avg_cost": matched.evaluation.avg_cost,
        },
    }))
}

/// Pool of `models` models with accuracy rising from 0.6 to 0.85 and cost
/// doubling per model; frontier over cascades of up to `max_models`.
pub fn frontier_data(
    examples: usize,
    models: usize,
    max_models: usize,
    correlation: f64,
    seed: u64,
) -> Result<Value> {
    let accuracies: Vec<f64> = (0..models)
        .map(|i| 0.6 + 0.25 * i as f64 / (models.max(2) - 1) as f64)
        .collect();
    let costs: Vec<f64> = (0..models).map(|i| 2f64.powi(i as i32)).collect();
    let pool = generate_synthetic_pool(
        &SynthConfig::new(examples, CLASSES, accuracies, costs)
            .correlation(correlation)
            .seed(seed),
    )?;
    let problem = SelectionProblem::new(&pool, Objective::MaxAccuracy(f64::MAX))
        .max_models(max_models)
        .grid_resolution(8);
    let frontier = search_frontier(&problem)?;
    let singles: Vec<Value> = pool
        .entries()
        .iter()
        .map(|e| json!({ "id": e.model_id, "accuracy": e.accuracy(pool.labels()), "avg_cost": e.cost }))
        .collect();
    let points: Vec<Value> = frontier
        .points
        .iter()
        .map(|p| {
            json!({
                "models": p.spec.notation(),
                "thresholds": p.spec.thresholds,
                "accuracy": p.evaluation.accuracy,
                "avg_cost": p.evaluation.avg_cost,
            })
        })
        .collect();
    Ok(json!({ "models": singles, "frontier": points }))
}

/// Selective-accuracy curve of one model under every confidence metric.
pub fn selective_data(examples: usize, accuracy: f64, seed: u64) -> Result<Value> {
    let pool = generate_synthetic_pool(
        &SynthConfig::new(examples, CLASSES, vec![accuracy], vec![1.0]).seed(seed),
    )?;
    let ks: Vec<f64> = (1..=20).map(|k| 5.0 * k as f64).collect();
    let mut curves = serde_json::Map::new();
    for metric in ConfidenceMetric::ALL {
        let curve = selective_accuracy(&pool.entries()[0], pool.labels(), metric, &ks)?;
        curves.insert(metric.name().to_string(), json!(curve.points));
    }
    Ok(json!({ "accuracy": pool.entries()[0].accuracy(pool.labels()), "curves": curves }))
}

fn to_js(result: Result<Value>) -> std::result::Result<String, JsValue> {
    result
        .map(|v| v.to_string())
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn sweep(
    examples: u32,
    acc_small: f64,
    acc_large: f64,
    cost_small: f64,
    cost_large: f64,
    correlation: f64,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(sweep_data(
        examples as usize,
        [acc_small, acc_large],
        [cost_small, cost_large],
        correlation,
        seed.into(),
    ))
}

#[wasm_bindgen]
pub fn frontier(
    examples: u32,
    models: u32,
    max_models: u32,
    correlation: f64,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(frontier_data(
        examples as usize,
        models as usize,
        max_models as usize,
        correlation,
        seed.into(),
    ))
}

#[wasm_bindgen]
pub fn selective(examples: u32, accuracy: f64, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(selective_data(examples as usize, accuracy, seed.into()))
}
