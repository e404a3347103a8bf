//! Drives the `risdt` binary on a very small run.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--num-scenes",
    "3",
    "--scenes",
    "2",
    "--episodes",
    "3",
    "--candidates",
    "2",
    "--epochs",
    "2",
    "--checkpoints",
    "1",
    "--checkpoint-seeds",
    "1",
    "--seeds",
    "2",
];

fn risdt(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_risdt"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("RISDT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, command: &str, extra: &[&str]) {
    let mut args = vec![command];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = risdt(out, &args);
    assert!(o.status.success(), "{command}: {}", String::from_utf8_lossy(&o.stderr));
}

fn error_record(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim()).expect("stderr is one JSON record")
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = risdt(dir.path(), &["train", "--policy", "rom"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["error"]["kind"], "usage");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"system\": {\"num_users\": 0}}").unwrap();
    let o = risdt(dir.path(), &["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["error"]["kind"], "config");
}

#[test]
fn missing_dataset_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    let o = risdt(dir.path(), &args);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&o)["error"]["command"], "train");
}

#[test]
fn small_pipeline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, "gen-data", &[]);
    ok(out, "train", &[]);
    assert!(out.join("models/pg-zfo.json").exists());
    assert!(out.join("models/df-wp.json").exists());

    ok(out, "eval", &[]);
    let first = std::fs::read(out.join("metrics_pg-zfo.csv")).unwrap();
    ok(out, "eval", &[]);
    assert_eq!(first, std::fs::read(out.join("metrics_pg-zfo.csv")).unwrap());
    // Header plus two seeds on the one held-out scene.
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 3);

    ok(out, "compare", &["--policy", "pg-zfo,df-wp,rom,random,expert"]);
    let compare = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    for p in ["pg-zfo", "df-wp", "rom", "random", "expert"] {
        assert_eq!(compare.lines().filter(|l| l.contains(&format!(",{p},"))).count(), 2, "{p}");
    }

    ok(out, "sweep-power", &["--policy", "pg-zfo,rom"]);
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    // Three power levels for each policy on the one held-out scene.
    assert_eq!(sweep.lines().count(), 1 + 3 * 2);

    ok(out, "summary", &[]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hashes"].as_array().unwrap().len(), 1);
    for fig in ["fig2_loss.csv", "fig3_qoe.csv", "fig4_pmax.csv"] {
        assert!(out.join(fig).exists(), "{fig}");
    }
}
