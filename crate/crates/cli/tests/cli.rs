//! Subcommand behavior: flags, exit codes, stdout/stderr contracts.

use std::path::Path;
use std::process::{Command, Output};

use splitsim_core::SyntheticSpec;

fn splitsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).unwrap()
}

fn write_dataset_spec(dir: &Path) -> std::path::PathBuf {
    let spec = SyntheticSpec {
        classes: 3,
        per_class_count: 20,
        feature_dim: 4,
        class_separation: 2.0,
        noise_sigma: 0.5,
        seed: 11,
    };
    let path = dir.join("dataset.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = splitsim(&[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("Usage"), "stderr: {err}");
}

#[test]
fn unknown_flag_is_rejected_with_usage() {
    let out = splitsim(&["bound", "--eps", "0.1", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("--no-such-flag"), "stderr: {err}");
}

#[test]
fn every_subcommand_has_help_listing_flags() {
    for (cmd, flag) in [
        ("partition", "--clients"),
        ("schedule", "--global-batch"),
        ("bound", "--eps"),
        ("analyze", "--trials"),
        ("train", "--config"),
        ("compare", "--config"),
    ] {
        let out = splitsim(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd} --help");
        let text = stdout(&out);
        assert!(text.contains(flag), "{cmd} help misses {flag}: {text}");
        assert!(text.contains("--json"), "{cmd} help misses --json");
    }
}

#[test]
fn bound_prints_the_closed_form_value() {
    let out = splitsim(&[
        "bound",
        "--eps",
        "0.1",
        "--batch",
        "1024",
        "--pool",
        "50000",
        "--classes",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let value: f64 = stdout(&out).trim().parse().unwrap();
    assert!((value - 1.66e-8).abs() < 0.01e-8, "printed bound {value}");
}

#[test]
fn bound_json_carries_raw_and_clipped() {
    let out = splitsim(&[
        "bound",
        "--eps",
        "0.1",
        "--batch",
        "128",
        "--pool",
        "50000",
        "--classes",
        "10",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json["clipped"], 1.0);
    let raw = json["raw"].as_f64().unwrap();
    assert!((raw - 1.536).abs() < 0.01, "raw {raw}");
}

#[test]
fn bound_rejects_invalid_inputs_as_runtime_error() {
    let out = splitsim(&[
        "bound",
        "--eps",
        "0.0",
        "--batch",
        "10",
        "--pool",
        "100",
        "--classes",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schedule_from_sizes_prints_the_schedule() {
    let out = splitsim(&[
        "schedule",
        "--strategy",
        "gpsl",
        "--global-batch",
        "4",
        "--sizes",
        "10",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json["strategy"], "gpsl");
    assert_eq!(json["B"], 4);
    assert_eq!(json["steps"].as_array().unwrap().len(), 3);
}

#[test]
fn schedule_requires_exactly_one_size_source() {
    let out = splitsim(&[
        "schedule",
        "--strategy",
        "fls",
        "--global-batch",
        "4",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn partition_writes_the_documented_file_shape() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_dataset_spec(dir.path());
    let out_path = dir.path().join("partition.json");
    let out = splitsim(&[
        "partition",
        "--dataset",
        dataset.to_str().unwrap(),
        "--kind",
        "dirichlet",
        "--clients",
        "4",
        "--classes-per-client",
        "2",
        "--alpha",
        "1.5",
        "--seed",
        "9",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(json["K"], 4);
    assert_eq!(json["C"], 2);
    assert_eq!(json["alpha"], 1.5);
    assert_eq!(json["seed"], 9);
    let indices = json["client_indices"].as_array().unwrap();
    assert_eq!(indices.len(), 4);
    let total: usize = indices.iter().map(|a| a.as_array().unwrap().len()).sum();
    assert_eq!(total, 60);
}

#[test]
fn analyze_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_dataset_spec(dir.path());
    let partition = dir.path().join("partition.json");
    let schedule = dir.path().join("schedule.json");
    assert!(splitsim(&[
        "partition",
        "--dataset",
        dataset.to_str().unwrap(),
        "--clients",
        "3",
        "--seed",
        "4",
        "--out",
        partition.to_str().unwrap(),
    ])
    .status
    .success());
    assert!(splitsim(&[
        "schedule",
        "--strategy",
        "gpsl",
        "--global-batch",
        "12",
        "--partition",
        partition.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        schedule.to_str().unwrap(),
    ])
    .status
    .success());

    let report = dir.path().join("report.json");
    let out = splitsim(&[
        "analyze",
        "--schedule",
        schedule.to_str().unwrap(),
        "--partition",
        partition.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--trials",
        "200",
        "--seed",
        "6",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["per_step_delta"].as_array().unwrap().len(), 5);
    assert_eq!(json["tails"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("step,delta,delta_smoothed\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn train_without_an_output_dir_fails_with_guidance() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "dataset": {
                "classes": 2, "per_class_count": 20, "feature_dim": 3,
                "class_separation": 2.0, "noise_sigma": 0.4, "seed": 1
            },
            "partition": {"kind": "iid", "clients": 2},
            "strategy": "gpsl",
            "global_batch": 10,
            "epochs": 1,
            "seeds": [1]
        })
        .to_string(),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_splitsim"))
        .args(["train", "--config", config.to_str().unwrap()])
        .env_remove("SPLITSIM_OUT_DIR")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("SPLITSIM_OUT_DIR"), "stderr: {err}");
}

#[test]
fn train_honors_the_output_dir_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "dataset": {
                "classes": 2, "per_class_count": 20, "feature_dim": 3,
                "class_separation": 2.0, "noise_sigma": 0.4, "seed": 1
            },
            "partition": {"kind": "iid", "clients": 2},
            "strategy": "gpsl",
            "global_batch": 10,
            "epochs": 1,
            "seeds": [1],
            "hidden_layers": [6]
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("report");
    let out = Command::new(env!("CARGO_BIN_EXE_splitsim"))
        .args(["train", "--config", config.to_str().unwrap()])
        .env("SPLITSIM_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(out_dir.join("summary.json").is_file());
    assert!(out_dir.join("config.json").is_file());
    assert!(out_dir.join("curves/seed1.csv").is_file());
}
