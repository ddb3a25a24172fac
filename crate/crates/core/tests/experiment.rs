use std::path::Path;

use clap::Parser;
use mfng::cli::config::ExperimentConfig;
use mfng::cli::data::{write_idx, IdxMatrix};
use mfng::cli::experiment::{run_experiment, RunOptions, METRICS_HEADER, TIMING_HEADER};
use mfng::cli::{load_model, run, Cli};
use mfng::Error;

fn config(algorithm: &str, epochs: usize, clock: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
version = 1
[model]
layer_sizes = [6, 4, 3]
[data]
kind = "bars_stripes"
rows = 2
cols = 3
train_size = 24
test_size = 12
seed = 4
[train]
algorithm = "{algorithm}"
learning_rate = 0.05
batch_size = 8
chains = 16
epochs = {epochs}
seed = 9
clock = "{clock}"
[output]
checkpoint_every = 2
"#
    ))
    .unwrap()
}

fn run_in(c: &ExperimentConfig, dir: &Path, resume: bool) -> mfng::Result<mfng::cli::RunSummary> {
    run_experiment(
        c,
        &RunOptions {
            out_dir: Some(dir.to_path_buf()),
            resume,
        },
    )
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn csv_outputs_parse_strictly() {
    let dir = tempfile::tempdir().unwrap();
    run_in(&config("mfng", 3, "wall"), dir.path(), false).unwrap();
    for (name, header, rows) in [("metrics.csv", METRICS_HEADER, 4), ("timing.csv", TIMING_HEADER, 3)] {
        let mut r = csv::ReaderBuilder::new()
            .flexible(false)
            .from_path(dir.path().join(name))
            .unwrap();
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>().join(","), header);
        let records: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        assert_eq!(records.len(), rows, "{name}");
        for rec in &records {
            assert_eq!(rec[0].parse::<usize>().unwrap() as f64, rec[0].parse::<f64>().unwrap());
            for field in rec.iter().filter(|f| !f.is_empty()) {
                assert!(field.parse::<f64>().unwrap().is_finite(), "{name}: {field}");
            }
        }
    }
}

#[test]
fn timing_phases_never_exceed_total() {
    let dir = tempfile::tempdir().unwrap();
    for alg in ["mfng", "mfng_diag", "sml"] {
        let out = dir.path().join(alg);
        run_in(&config(alg, 2, "wall"), &out, false).unwrap();
        let mut r = csv::Reader::from_path(out.join("timing.csv")).unwrap();
        for rec in r.records().map(Result::unwrap) {
            let v: Vec<f64> = rec.iter().skip(1).map(|f| f.parse().unwrap()).collect();
            let phases: f64 = v[..5].iter().sum();
            assert!(phases <= v[5] + 1e-9, "{alg}: {phases} > {}", v[5]);
            assert!(v[5] > 0.0);
        }
    }
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("mfng", 3, "disabled");
    run_in(&c, &dir.path().join("a"), false).unwrap();
    run_in(&c, &dir.path().join("b"), false).unwrap();
    for name in ["metrics.csv", "timing.csv", "updates.jsonl"] {
        assert_eq!(
            read(&dir.path().join("a"), name),
            read(&dir.path().join("b"), name),
            "{name}"
        );
    }
}

#[test]
fn resume_reproduces_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    run_in(&config("mfng", 5, "disabled"), &full, false).unwrap();

    // stop after epoch 3; the newest checkpoint is epoch 2
    run_in(&config("mfng", 3, "disabled"), &split, false).unwrap();
    std::fs::remove_file(split.join("checkpoints/epoch_00003.state")).unwrap();
    let s = run_in(&config("mfng", 5, "disabled"), &split, true).unwrap();
    assert_eq!(s.epochs_completed, 5);

    for name in ["metrics.csv", "timing.csv", "updates.jsonl"] {
        assert_eq!(read(&full, name), read(&split, name), "{name}");
    }
    let a = load_model(full.join("checkpoints/epoch_00005.model")).unwrap();
    let b = load_model(split.join("checkpoints/epoch_00005.model")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn jsonl_log_has_updates_and_evaluations() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_in(&config("sml", 2, "disabled"), dir.path(), false).unwrap();
    let lines: Vec<serde_json::Value> = read(dir.path(), "updates.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let updates = lines.iter().filter(|v| v["type"] == "update").count();
    let evals: Vec<&serde_json::Value> = lines.iter().filter(|v| v["type"] == "eval").collect();
    assert_eq!(updates as u64, s.updates);
    assert_eq!(updates, 2 * 3);
    assert_eq!(evals.len(), 3);
    assert_eq!(evals[0]["epoch"], 0);
    assert_eq!(evals[2]["method"], "exact");
    assert!(evals[2]["test_loglik"].as_f64().unwrap() < 0.0);
}

#[test]
fn idx_data_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<Vec<f64>> = (0..10)
        .map(|i| (0..4).map(|p| if (i + p) % 3 == 0 { 1.0 } else { 0.2 }).collect())
        .collect();
    let idx = IdxMatrix {
        dims: vec![10, 2, 2],
        rows: images,
    };
    write_idx(dir.path().join("train.idx"), &idx).unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        r#"
version = 1
[model]
layer_sizes = [4, 3]
[data]
kind = "idx"
train_images = "train.idx"
train_subset = 8
[train]
batch_size = 4
epochs = 2
clock = "disabled"
[output]
dir = "out"
"#,
    )
    .unwrap();
    let c = ExperimentConfig::load(dir.path().join("run.toml")).unwrap();
    let s = run_experiment(&c, &RunOptions::default()).unwrap();
    assert_eq!(s.updates, 4);
    assert_eq!(s.out_dir, dir.path().join("out"));
    assert!(s.last_eval.unwrap().test_loglik.is_none());
}

#[test]
fn command_line_train_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, config("mfng", 2, "disabled").to_toml_string().unwrap()).unwrap();
    let out = dir.path().join("out");
    let path = |p: &Path| p.to_str().unwrap().to_string();

    let mut buf = Vec::new();
    let args = [
        "mfng",
        "train",
        "--config",
        &path(&cfg),
        "--out",
        &path(&out),
        "--seed",
        "3",
        "--algorithm",
        "sml",
    ];
    run(Cli::try_parse_from(args).unwrap(), &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("2 epochs, 6 updates"));
    let saved = ExperimentConfig::from_toml_str(&read(&out, "config.toml")).unwrap();
    assert_eq!(saved.train.seed, 3);
    assert_eq!(saved.train.algorithm.name(), "sml");

    let ckpt = out.join("checkpoints/epoch_00002.model");
    let mut buf = Vec::new();
    run(
        Cli::try_parse_from(["mfng", "eval", "--config", &path(&cfg), "--checkpoint", &path(&ckpt)]).unwrap(),
        &mut buf,
    )
    .unwrap();
    let record: serde_json::Value = serde_json::from_slice(&buf).unwrap();
    assert!(record["train_loglik"].as_f64().unwrap() < 0.0);

    for (file, expect) in [
        (ckpt.clone(), "model [6, 4, 3]"),
        (out.join("checkpoints/epoch_00002.pool"), "chain pool 16 chains"),
        (
            out.join("checkpoints/epoch_00002.state"),
            "run state: 2 epochs, 6 updates",
        ),
        (cfg.clone(), "layer_sizes"),
    ] {
        let mut buf = Vec::new();
        run(
            Cli::try_parse_from(["mfng", "inspect", &path(&file)]).unwrap(),
            &mut buf,
        )
        .unwrap();
        assert!(String::from_utf8(buf).unwrap().contains(expect), "{}", file.display());
    }

    assert!(Cli::try_parse_from(["mfng", "train", "--config", "x", "--algorithm", "adam"]).is_err());
    assert!(Cli::try_parse_from(["mfng", "train"]).is_err());
}

#[test]
fn divergence_aborts_with_partial_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config("sml", 50, "disabled");
    c.train.learning_rate = f64::MAX;
    let err = run_in(&c, dir.path(), false).unwrap_err();
    assert!(matches!(err, Error::TrainingAborted { .. }), "{err}");
    assert!(dir.path().join("aborted.model").exists());
    assert!(read(dir.path(), "metrics.csv").lines().count() >= 2);
    assert!(!dir.path().join(".lock").exists());
}
