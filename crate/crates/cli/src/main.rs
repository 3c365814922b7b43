mod args;
mod output;

use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use committee::dense::{
    generate_synthetic_dense_pool, load_dense_pool, save_dense_pool, search_dense_thresholds,
    DenseSynthConfig,
};
use committee::selection::search_frontier;
use committee::store::split_dataset;
use committee::thresholds::write_sweep_csv;
use committee::{
    build_threshold_grid, evaluate_cascade, evaluate_dense_cascade, generate_synthetic_pool,
    load_pool, save_pool, search_thresholds, select_cascade, selective_accuracy, threshold_sweep,
    CascadeReport, CascadeSpec, DenseCascadeSpec, ModelPool, Objective, SelectionProblem,
    SynthConfig,
};
use serde_json::json;

use args::{Cli, Command, HoldoutArgs, ObjectiveArgs};
use output::{exit_table, summary_line, Output};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let infeasible = e
                .downcast_ref::<committee::Error>()
                .is_some_and(committee::Error::is_infeasible);
            eprintln!("error: {e:#}");
            ExitCode::from(if infeasible { 2 } else { 1 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .context("starting worker threads")?;
    }
    let config = serde_json::to_value(cli)?;
    match &cli.command {
        Command::Validate(a) => validate(a),
        Command::Split(a) => {
            let pool = load_pool(&a.pool.manifest)?;
            let (selection, evaluation) = split_dataset(&pool, a.fraction, a.seed)?;
            save_pool(&selection, a.out.join("threshold-selection"))?;
            save_pool(&evaluation, a.out.join("evaluation"))?;
            println!(
                "{} threshold-selection and {} evaluation examples written under {}",
                selection.num_examples(),
                evaluation.num_examples(),
                a.out.display()
            );
            Ok(())
        }
        Command::Synth(a) => synth(a),
        Command::Evaluate(a) => {
            let pool = load_pool(&a.pool.manifest)?;
            let spec = if a.ensemble {
                CascadeSpec::ensemble(
                    a.spec.models.clone(),
                    a.scoring.metric,
                    a.scoring.aggregation,
                )
            } else {
                let thresholds =
                    parse_thresholds(a.spec.thresholds.as_deref(), a.spec.models.len())?;
                CascadeSpec::new(a.spec.models.clone(), thresholds)
                    .with_metric(a.scoring.metric)
                    .with_aggregation(a.scoring.aggregation)
            };
            let eval = evaluate_cascade(&spec, &pool)?;
            if let Some(path) = &a.trace {
                let file = std::fs::File::create(path)
                    .with_context(|| format!("creating {}", path.display()))?;
                eval.write_trace(&pool.labels().labels, file)?;
            }
            let out = Output::new(&a.out)?;
            let table = exit_table(&spec, &pool, &eval)?;
            out.csv("exit_ratios.csv", |w| output::write_exit_table(&table, w))?;
            out.report(
                json!({ "config": config, "spec": spec, "report": CascadeReport::new(&spec, &eval), "exits": table }),
                &summary_line(&spec, &eval),
            )
        }
        Command::Sweep(a) => {
            let pool = load_pool(&a.pool.manifest)?;
            let (metric, agg) = (a.scoring.metric, a.scoring.aggregation);
            let grid = build_threshold_grid(&a.models, &pool, metric, agg, a.grid_resolution)?;
            let points = threshold_sweep(&a.models, &pool, metric, agg, a.stage, &grid, &a.fixed)?;
            let out = Output::new(&a.out)?;
            out.csv("sweep.csv", |w| write_sweep_csv(&points, w))?;
            let (first, last) = (points.first().unwrap(), points.last().unwrap());
            out.report(
                json!({ "config": config, "points": points }),
                &format!(
                    "{} points; t={} gives accuracy {:.4} at cost {:.4}, t={} gives accuracy {:.4} at cost {:.4}",
                    points.len(),
                    first.t,
                    first.accuracy,
                    first.avg_cost,
                    last.t,
                    last.accuracy,
                    last.avg_cost
                ),
            )
        }
        Command::SearchThresholds(a) => {
            let pool = load_pool(&a.pool.manifest)?;
            let (search, held) = holdout(&pool, &a.holdout)?;
            let (metric, agg) = (a.scoring.metric, a.scoring.aggregation);
            let grid = build_threshold_grid(&a.models, &search, metric, agg, a.grid_resolution)?;
            let found =
                search_thresholds(&a.models, &search, a.target.target(), metric, agg, &grid)?;
            let spec = CascadeSpec::new(a.models.clone(), found.thresholds.clone())
                .with_metric(metric)
                .with_aggregation(agg);
            report_cascade(
                config,
                &spec,
                &search,
                held.as_ref(),
                &a.out,
                json!({ "points_evaluated": found.points_evaluated }),
            )
        }
        Command::Select(a) => {
            let pool = load_pool(&a.pool.manifest)?;
            let (search, held) = holdout(&pool, &a.holdout)?;
            let mut problem = SelectionProblem::new(&search, objective(&a.objective))
                .max_models(a.max_models)
                .metric(a.scoring.metric)
                .aggregation(a.scoring.aggregation)
                .grid_resolution(a.grid_resolution)
                .order_policy(a.order_policy);
            if let Some(bound) = a.worst_case {
                problem = problem.worst_case_bound(bound);
            }
            let chosen = select_cascade(&problem)?;
            report_cascade(
                config,
                &chosen.spec,
                &search,
                held.as_ref(),
                &a.out,
                json!({
                    "candidates_searched": chosen.candidates_searched,
                    "candidates_feasible": chosen.candidates_feasible,
                }),
            )
        }
        Command::Pareto(a) => {
            let pool = load_pool(&a.pool.manifest)?;
            let (search, held) = holdout(&pool, &a.holdout)?;
            let mut problem = SelectionProblem::new(&search, Objective::MaxAccuracy(f64::MAX))
                .max_models(a.max_models)
                .metric(a.scoring.metric)
                .aggregation(a.scoring.aggregation)
                .grid_resolution(a.grid_resolution)
                .order_policy(a.order_policy);
            if let Some(bound) = a.worst_case {
                problem = problem.worst_case_bound(bound);
            }
            let frontier = search_frontier(&problem)?;
            let mut points = Vec::new();
            for p in &frontier.points {
                let held_out = match &held {
                    Some(h) => Some(CascadeReport::new(&p.spec, &evaluate_cascade(&p.spec, h)?)),
                    None => None,
                };
                points.push(json!({
                    "spec": p.spec,
                    "selection": CascadeReport::new(&p.spec, &p.evaluation),
                    "evaluation": held_out,
                }));
            }
            let out = Output::new(&a.out)?;
            out.csv("frontier.csv", |w| frontier.write_csv(w))?;
            let lines: Vec<String> = frontier
                .points
                .iter()
                .map(|p| summary_line(&p.spec, &p.evaluation))
                .collect();
            out.report(
                json!({ "config": config, "frontier": points }),
                &lines.join("\n"),
            )
        }
        Command::SelectiveAccuracy(a) => {
            let pool = load_pool(&a.pool.manifest)?;
            let model = pool.entry(&a.model)?;
            let curve = selective_accuracy(model, pool.labels(), a.metric, &a.ks)?;
            let out = Output::new(&a.out)?;
            out.csv("selective_accuracy.csv", |w| curve.write_csv(w))?;
            let lines: Vec<String> = curve
                .points
                .iter()
                .map(|p| format!("top {:>5}%  accuracy {:.4}", p.k, p.accuracy))
                .collect();
            out.report(
                json!({ "config": config, "curve": curve }),
                &lines.join("\n"),
            )
        }
        Command::DenseEvaluate(a) => {
            let pool = load_dense_pool(&a.pool.manifest)?;
            let thresholds = parse_thresholds(a.spec.thresholds.as_deref(), a.spec.models.len())?;
            let mut spec = DenseCascadeSpec::new(a.spec.models.clone(), thresholds, a.dense.cell)
                .with_t_unlab(a.dense.t_unlab);
            spec.aggregation = a.dense.aggregation;
            let eval = evaluate_dense_cascade(&spec, &pool)?;
            Output::new(&a.out)?.report(
                json!({ "config": config, "spec": spec, "evaluation": eval }),
                &output::dense_line(&spec, &eval),
            )
        }
        Command::DenseSearch(a) => {
            let pool = load_dense_pool(&a.pool.manifest)?;
            let mut spec = DenseCascadeSpec::new(a.models.clone(), Vec::new(), a.dense.cell)
                .with_t_unlab(a.dense.t_unlab);
            spec.aggregation = a.dense.aggregation;
            let found =
                search_dense_thresholds(&spec, &pool, a.target.target(), a.grid_resolution)?;
            spec.thresholds = found.thresholds.clone();
            Output::new(&a.out)?.report(
                json!({ "config": config, "spec": spec, "evaluation": found.evaluation }),
                &output::dense_line(&spec, &found.evaluation),
            )
        }
    }
}

fn validate(a: &args::ValidateArgs) -> Result<()> {
    if a.dense {
        let pool = load_dense_pool(&a.pool.manifest)?;
        let [h, w] = pool.shape();
        println!(
            "dense pool: {} images of {h}x{w}, {} classes, {} models",
            pool.num_images(),
            pool.num_classes(),
            pool.entries().len()
        );
        for e in pool.entries() {
            println!("  {:<20} {:<16} cost {}", e.model_id, e.model_type, e.cost);
        }
        return Ok(());
    }
    let pool = load_pool(&a.pool.manifest)?;
    println!(
        "pool: {} examples, {} classes, {} models",
        pool.num_examples(),
        pool.num_classes(),
        pool.entries().len()
    );
    for e in pool.entries() {
        let resolution = e
            .resolution
            .map_or_else(|| "-".to_string(), |r| r.to_string());
        println!(
            "  {:<20} {:<16} res {:<5} rep {:<3} cost {:<10} accuracy {:.4}",
            e.model_id,
            e.model_type,
            resolution,
            e.replicate_index,
            e.cost,
            e.accuracy(pool.labels())
        );
    }
    Ok(())
}

fn synth(a: &args::SynthArgs) -> Result<()> {
    if a.dense {
        let [weak, strong] = match a.costs[..] {
            [w, s] => [w, s],
            _ => bail!("a dense pool has two models; pass two --costs"),
        };
        let pool = generate_synthetic_dense_pool(&DenseSynthConfig {
            num_images: a.images,
            height: a.height,
            width: a.width,
            num_classes: a.classes,
            costs: [weak, strong],
            ignore_fraction: 0.0,
            seed: a.seed,
        })?;
        save_dense_pool(&pool, &a.out)?;
        println!(
            "dense pool with {} images written to {}",
            pool.num_images(),
            a.out.display()
        );
        return Ok(());
    }
    let mut config = SynthConfig::new(a.examples, a.classes, a.accuracies.clone(), a.costs.clone())
        .correlation(a.correlation)
        .seed(a.seed);
    if let Some(types) = &a.types {
        config = config.model_types(types.clone());
    }
    let pool = generate_synthetic_pool(&config)?;
    save_pool(&pool, &a.out)?;
    println!(
        "pool with {} models written to {}",
        pool.entries().len(),
        a.out.display()
    );
    Ok(())
}

/// `""` or nothing for a single model; otherwise one value per model but the last.
fn parse_thresholds(raw: Option<&str>, models: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = raw
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .with_context(|| format!("threshold `{s}` is not a number"))
        })
        .collect::<Result<_>>()?;
    if raw.is_none() && models > 1 {
        bail!("--thresholds is required for {models} models (or pass --ensemble)");
    }
    Ok(values)
}

fn objective(a: &ObjectiveArgs) -> Objective {
    match (a.target_flops, a.target_accuracy) {
        (Some(b), _) => Objective::MaxAccuracy(b),
        (_, Some(g)) => Objective::MinCost(g),
        _ => unreachable!("clap requires one target"),
    }
}

fn holdout(pool: &ModelPool, a: &HoldoutArgs) -> Result<(ModelPool, Option<ModelPool>)> {
    match a.split {
        Some(fraction) => {
            let (search, held) = split_dataset(pool, fraction, a.seed)?;
            Ok((search, Some(held)))
        }
        None => Ok((pool.clone(), None)),
    }
}

/// Report of a chosen cascade on the search pool and, when split off, the
/// held-out pool.
fn report_cascade(
    config: serde_json::Value,
    spec: &CascadeSpec,
    search: &ModelPool,
    held: Option<&ModelPool>,
    out: &args::OutArgs,
    extra: serde_json::Value,
) -> Result<()> {
    let eval = evaluate_cascade(spec, search)?;
    let table = exit_table(spec, search, &eval)?;
    let mut summary = summary_line(spec, &eval);
    let held_out = match held {
        Some(h) => {
            let e = evaluate_cascade(spec, h)?;
            summary.push_str(&format!(
                "\nheld-out ({} examples): accuracy {:.4}, avg cost {:.4}",
                h.num_examples(),
                e.accuracy,
                e.avg_cost
            ));
            Some(CascadeReport::new(spec, &e))
        }
        None => None,
    };
    let out = Output::new(out)?;
    out.csv("exit_ratios.csv", |w| output::write_exit_table(&table, w))?;
    out.report(
        json!({
            "config": config,
            "spec": spec,
            "selection": CascadeReport::new(spec, &eval),
            "evaluation": held_out,
            "exits": table,
            "search": extra,
        }),
        &summary,
    )
}
