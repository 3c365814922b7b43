use std::fs::{self, File};
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use committee::{CascadeEvaluation, CascadeSpec, DenseCascadeSpec, DenseEvaluation, ModelPool};
use serde::Serialize;

use crate::args::OutArgs;

/// Where reports go: files under `--out`, or the JSON report on stdout.
pub struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    pub fn new(args: &OutArgs) -> Result<Self> {
        if let Some(dir) = &args.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(Output {
            dir: args.out.clone(),
        })
    }

    /// Writes a CSV file; skipped without `--out`.
    pub fn csv(&self, name: &str, write: impl FnOnce(File) -> std::io::Result<()>) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write(file).with_context(|| format!("writing {}", path.display()))
    }

    /// With `--out`: `report.json` plus the summary on stdout. Without: the
    /// summary on stderr and the report on stdout.
    pub fn report(&self, report: serde_json::Value, summary: &str) -> Result<()> {
        let text = serde_json::to_string_pretty(&report)?;
        match &self.dir {
            Some(dir) => {
                let path = dir.join("report.json");
                fs::write(&path, text + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("{summary}");
            }
            None => {
                eprintln!("{summary}");
                println!("{text}");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct ExitRow {
    pub stage: usize,
    pub model: String,
    pub cumulative_cost: f64,
    pub exit_count: usize,
    pub exit_percent: f64,
}

pub fn exit_table(
    spec: &CascadeSpec,
    pool: &ModelPool,
    eval: &CascadeEvaluation,
) -> Result<Vec<ExitRow>> {
    let mut cum = 0.0;
    let mut rows = Vec::new();
    for (k, id) in spec.models.iter().enumerate() {
        cum += pool.entry(id)?.cost;
        rows.push(ExitRow {
            stage: k + 1,
            model: id.clone(),
            cumulative_cost: cum,
            exit_count: eval.exit_counts[k],
            exit_percent: 100.0 * eval.exit_ratios[k],
        });
    }
    Ok(rows)
}

pub fn write_exit_table<W: Write>(rows: &[ExitRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()
}

fn percents(ratios: &[f64]) -> String {
    ratios
        .iter()
        .map(|r| format!("{:.1}%", 100.0 * r))
        .collect::<Vec<_>>()
        .join(" / ")
}

pub fn summary_line(spec: &CascadeSpec, eval: &CascadeEvaluation) -> String {
    format!(
        "{}  thresholds {:?}  accuracy {:.4}  avg cost {:.4}  worst case {}  exits {}",
        spec.notation(),
        spec.thresholds,
        eval.accuracy,
        eval.avg_cost,
        eval.worst_case_cost,
        percents(&eval.exit_ratios)
    )
}

pub fn dense_line(spec: &DenseCascadeSpec, eval: &DenseEvaluation) -> String {
    format!(
        "{}  thresholds {:?}  mIoU {:.4}  avg cost {:.4}  worst case {}  cell exits {}",
        spec.models.join("+"),
        spec.thresholds,
        eval.miou,
        eval.avg_cost,
        eval.worst_case_cost,
        percents(&eval.cell_exit_ratios)
    )
}
