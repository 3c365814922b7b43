use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use committee::{
    generate_synthetic_pool, save_pool, select_cascade, LabeledDataset, ModelPool, Objective,
    PredictionSet, SelectionProblem, SynthConfig,
};
use serde_json::Value;
use tempfile::TempDir;

fn committee(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_committee"))
        .args(args)
        .env_remove("COMMITTEE_JOBS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(
        code(out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report on stdout")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three examples, two models; cascade a->b at t=0.6 exits [1, 2, 1].
fn fixture(dir: &TempDir) -> PathBuf {
    let a = PredictionSet::new("a", "small", vec![2.0, 0.0, 0.1, 0.0, 0.0, 1.0], 2, 1.0).unwrap();
    let b = PredictionSet::new("b", "large", vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0], 2, 4.0).unwrap();
    let pool = ModelPool::new(vec![a, b], LabeledDataset::new(vec![0, 0, 1])).unwrap();
    let p = dir.path().join("fixture");
    save_pool(&pool, &p).unwrap();
    p
}

fn synthetic(dir: &TempDir) -> (PathBuf, ModelPool) {
    let cfg = SynthConfig::new(600, 10, vec![0.62, 0.7, 0.8], vec![1.0, 2.5, 6.0]).seed(9);
    let pool = generate_synthetic_pool(&cfg).unwrap();
    let p = dir.path().join("synth");
    save_pool(&pool, &p).unwrap();
    (p, pool)
}

#[test]
fn evaluate_fixture_cost() {
    let dir = TempDir::new().unwrap();
    let pool = fixture(&dir);
    let report = stdout_json(&committee(&[
        "evaluate",
        "--manifest",
        path(&pool),
        "--models",
        "a,b",
        "--thresholds",
        "0.6",
    ]));
    let avg = report["report"]["avg_cost"].as_f64().unwrap();
    assert!((avg - 7.0 / 3.0).abs() < 1e-9);
    assert_eq!(report["report"]["accuracy"].as_f64().unwrap(), 1.0);
    assert_eq!(report["config"]["command"]["command"], "evaluate");
    assert_eq!(report["config"]["command"]["thresholds"], "0.6");
}

#[test]
fn solitary_and_ensemble_reports() {
    let dir = TempDir::new().unwrap();
    let pool = fixture(&dir);
    let solo = stdout_json(&committee(&[
        "evaluate",
        "--manifest",
        path(&pool),
        "--models",
        "a",
        "--thresholds",
        "",
    ]));
    assert_eq!(solo["report"]["avg_cost"].as_f64().unwrap(), 1.0);
    assert_eq!(solo["report"]["exit_ratios"], serde_json::json!([1.0]));

    let cascade = stdout_json(&committee(&[
        "evaluate",
        "--manifest",
        path(&pool),
        "--models",
        "a,b",
        "--thresholds",
        "1.0",
    ]));
    let ensemble = stdout_json(&committee(&[
        "evaluate",
        "--manifest",
        path(&pool),
        "--models",
        "a,b",
        "--ensemble",
    ]));
    for field in ["accuracy", "avg_cost", "exit_ratios"] {
        assert_eq!(
            cascade["report"][field], ensemble["report"][field],
            "{field}"
        );
    }
}

#[test]
fn trace_and_exit_table_files() {
    let dir = TempDir::new().unwrap();
    let pool = fixture(&dir);
    let out = dir.path().join("out");
    let trace = dir.path().join("trace.csv");
    let run = committee(&[
        "evaluate",
        "--manifest",
        path(&pool),
        "--models",
        "a,b",
        "--thresholds",
        "0.6",
        "--trace",
        path(&trace),
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&run), 0);
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("a+b"), "{stdout}");
    assert!(stdout.contains("66.7% / 33.3%"), "{stdout}");
    let trace = fs::read_to_string(trace).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(
        lines[0],
        "example,exit_stage,predicted,label,confidence_at_exit"
    );
    let stages: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(stages, ["1", "2", "1"]);
    assert!(out.join("report.json").exists());

    let table = fs::read_to_string(out.join("exit_ratios.csv")).unwrap();
    let total: f64 = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 100.0).abs() <= 0.1);
}

#[test]
fn invalid_input_exits_one() {
    let dir = TempDir::new().unwrap();
    let pool = fixture(&dir);
    assert_eq!(
        code(&committee(&[
            "evaluate",
            "--manifest",
            path(&pool),
            "--models",
            "a,zz",
            "--thresholds",
            "0.5"
        ])),
        1
    );
    assert_eq!(
        code(&committee(&[
            "evaluate",
            "--manifest",
            path(&pool),
            "--models",
            "a,b",
            "--thresholds",
            "0.5,0.5"
        ])),
        1
    );
    assert_eq!(
        code(&committee(&[
            "evaluate",
            "--manifest",
            path(&pool),
            "--models",
            "a,b"
        ])),
        1
    );
    assert_eq!(
        code(&committee(&[
            "validate",
            "--manifest",
            path(&dir.path().join("missing"))
        ])),
        1
    );
    assert_eq!(
        code(&committee(&[
            "search-thresholds",
            "--manifest",
            path(&pool),
            "--models",
            "a,b"
        ])),
        1
    );
    assert_eq!(
        code(&committee(&[
            "search-thresholds",
            "--manifest",
            path(&pool),
            "--models",
            "a,b",
            "--target-flops",
            "2",
            "--target-accuracy",
            "0.5"
        ])),
        1
    );
    assert_eq!(code(&committee(&["no-such-command"])), 1);
    assert_eq!(code(&committee(&["--help"])), 0);
}

#[test]
fn infeasible_targets_exit_two() {
    let dir = TempDir::new().unwrap();
    let (pool, _) = synthetic(&dir);
    let high = committee(&[
        "select",
        "--manifest",
        path(&pool),
        "--target-accuracy",
        "0.999",
        "--max-models",
        "2",
        "--grid-resolution",
        "10",
    ]);
    assert_eq!(code(&high), 2);
    assert!(String::from_utf8_lossy(&high.stderr).contains("best achievable"));

    let tight = committee(&[
        "select",
        "--manifest",
        path(&pool),
        "--target-flops",
        "5",
        "--worst-case",
        "0.5",
    ]);
    assert_eq!(code(&tight), 2);

    let budget = committee(&[
        "search-thresholds",
        "--manifest",
        path(&pool),
        "--models",
        "m1,m2",
        "--target-flops",
        "1",
    ]);
    assert_eq!(code(&budget), 2);
}

#[test]
fn select_matches_library() {
    let dir = TempDir::new().unwrap();
    let (manifest, pool) = synthetic(&dir);
    let report = stdout_json(&committee(&[
        "select",
        "--manifest",
        path(&manifest),
        "--target-flops",
        "2.5",
        "--max-models",
        "3",
        "--grid-resolution",
        "10",
    ]));
    let expected = select_cascade(
        &SelectionProblem::new(&pool, Objective::MaxAccuracy(2.5))
            .max_models(3)
            .grid_resolution(10),
    )
    .unwrap();
    assert_eq!(
        report["spec"]["models"],
        serde_json::json!(expected.spec.models)
    );
    assert_eq!(
        report["selection"]["accuracy"].as_f64().unwrap(),
        expected.evaluation.accuracy
    );
    assert_eq!(
        report["selection"]["avg_cost"].as_f64().unwrap(),
        expected.evaluation.avg_cost
    );
}

#[test]
fn output_independent_of_jobs() {
    let dir = TempDir::new().unwrap();
    let (pool, _) = synthetic(&dir);
    let args = [
        "select",
        "--manifest",
        path(&pool),
        "--target-accuracy",
        "0.85",
        "--max-models",
        "3",
        "--grid-resolution",
        "10",
    ];
    let mut reports = Vec::new();
    for jobs in ["1", "3"] {
        let out = Command::new(env!("CARGO_BIN_EXE_committee"))
            .args(args)
            .env("COMMITTEE_JOBS", jobs)
            .output()
            .unwrap();
        let mut report = stdout_json(&out);
        assert_eq!(report["config"]["jobs"].as_u64().unwrap().to_string(), jobs);
        report["config"]["jobs"] = Value::Null;
        reports.push(report);
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn split_reports_both_parts() {
    let dir = TempDir::new().unwrap();
    let (pool, _) = synthetic(&dir);
    let report = stdout_json(&committee(&[
        "search-thresholds",
        "--manifest",
        path(&pool),
        "--models",
        "m0,m2",
        "--match-ensemble",
        "--split",
        "0.5",
        "--seed",
        "4",
    ]));
    let evaluation = &report["evaluation"];
    assert!(evaluation.is_object());
    assert_eq!(report["selection"]["thresholds"], evaluation["thresholds"]);
    assert_eq!(
        report["config"]["command"]["match_ensemble"]
            .as_f64()
            .unwrap(),
        0.001
    );

    let parts = dir.path().join("parts");
    assert_eq!(
        code(&committee(&[
            "split",
            "--manifest",
            path(&pool),
            "--fraction",
            "0.25",
            "--seed",
            "1",
            "--out",
            path(&parts)
        ])),
        0
    );
    let first = committee::load_pool(parts.join("threshold-selection")).unwrap();
    let second = committee::load_pool(parts.join("evaluation")).unwrap();
    assert_eq!((first.num_examples(), second.num_examples()), (150, 450));
}

#[test]
fn sweep_endpoints() {
    let dir = TempDir::new().unwrap();
    let (manifest, pool) = synthetic(&dir);
    let out = dir.path().join("sweep");
    assert_eq!(
        code(&committee(&[
            "sweep",
            "--manifest",
            path(&manifest),
            "--models",
            "m0,m2",
            "--grid-resolution",
            "20",
            "--out",
            path(&out)
        ])),
        0
    );
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let first = &rows[0];
    let last = rows.last().unwrap();
    let solo = pool.entries()[0].accuracy(pool.labels());
    let ensemble =
        committee::evaluate_ensemble(&["m0", "m2"], &pool, committee::AggregationMode::MeanLogits)
            .unwrap();
    assert_eq!((first[0], first[1], first[2]), (0.0, solo, 1.0));
    assert_eq!(
        (last[0], last[1], last[2]),
        (1.0, ensemble.accuracy, ensemble.avg_cost)
    );
}

#[test]
fn frontier_accuracy_increases() {
    let dir = TempDir::new().unwrap();
    let (pool, _) = synthetic(&dir);
    let out = dir.path().join("pareto");
    assert_eq!(
        code(&committee(&[
            "pareto",
            "--manifest",
            path(&pool),
            "--out",
            path(&out)
        ])),
        0
    );
    let csv = fs::read_to_string(out.join("frontier.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "avg_cost,accuracy,worst_case_cost,models,thresholds"
    );
    let acc: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(acc.len() > 2);
    assert!(acc.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn selective_accuracy_curve() {
    let dir = TempDir::new().unwrap();
    let (manifest, pool) = synthetic(&dir);
    let report = stdout_json(&committee(&[
        "selective-accuracy",
        "--manifest",
        path(&manifest),
        "--model",
        "m1",
        "--ks",
        "50,100",
    ]));
    let points = report["curve"]["points"].as_array().unwrap();
    assert_eq!(
        points[1]["accuracy"].as_f64().unwrap(),
        pool.entries()[1].accuracy(pool.labels())
    );
}

#[test]
fn dense_round_trip() {
    let dir = TempDir::new().unwrap();
    let pool = dir.path().join("dense");
    assert_eq!(
        code(&committee(&[
            "synth",
            "--dense",
            "--out",
            path(&pool),
            "--classes",
            "3",
            "--costs",
            "1,2"
        ])),
        0
    );
    assert_eq!(
        code(&committee(&[
            "validate",
            "--dense",
            "--manifest",
            path(&pool)
        ])),
        0
    );
    let found = stdout_json(&committee(&[
        "dense-search",
        "--manifest",
        path(&pool),
        "--models",
        "weak,strong",
        "--cell",
        "8",
        "--match-ensemble",
        "0",
    ]));
    assert_eq!(found["evaluation"]["miou"].as_f64().unwrap(), 1.0);
    assert_eq!(found["evaluation"]["avg_cost"].as_f64().unwrap(), 1.5);
    let t = found["spec"]["thresholds"][0].as_f64().unwrap().to_string();
    let again = stdout_json(&committee(&[
        "dense-evaluate",
        "--manifest",
        path(&pool),
        "--models",
        "weak,strong",
        "--thresholds",
        &t,
        "--cell",
        "8",
    ]));
    assert_eq!(again["evaluation"], found["evaluation"]);
}

/// A manifest written by hand, the way an external exporter would.
#[test]
fn validate_hand_written_manifest() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let blob = |values: &[f32]| {
        values
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect::<Vec<u8>>()
    };
    fs::write(root.join("a.f32"), blob(&[1.0, 0.0, 0.0, 1.0, 2.0, 1.0])).unwrap();
    fs::write(root.join("b.f32"), blob(&[0.0, 3.0, 0.0, 1.0, 0.5, 0.0])).unwrap();
    fs::write(
        root.join("labels.u32"),
        [0u32, 1, 0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect::<Vec<u8>>(),
    )
    .unwrap();
    let manifest = serde_json::json!({
        "version": 1,
        "num_examples": 3,
        "num_classes": 2,
        "labels": "labels.u32",
        "entries": [
            {"model_id": "a", "model_type": "small", "cost": 1.0, "logits": "a.f32"},
            {"model_id": "b", "model_type": "large", "cost": 2.0, "logits": "b.f32"}
        ]
    });
    fs::write(
        root.join("pool.json"),
        serde_json::to_string(&manifest).unwrap(),
    )
    .unwrap();
    let out = committee(&["validate", "--manifest", path(&root.join("pool.json"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stderr.is_empty());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("3 examples, 2 classes, 2 models"), "{text}");

    fs::write(root.join("b.f32"), blob(&[0.0, 3.0, 0.0])).unwrap();
    assert_eq!(code(&committee(&["validate", "--manifest", path(root)])), 1);
}
