use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn levelk(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levelk"))
        .arg("--config")
        .arg(desk_config())
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "command failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn best_response_reports_argmax_levels() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(levelk(dir.path(), &["best-response", "--coeffs", "0.2,0.5,0.3", "--verify"]));
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["levels"], serde_json::json!([2]));
    assert_eq!(v["value"], 0.5);
    assert_eq!(v["oracle"]["agrees"], true);
}

#[test]
fn best_response_ties_split_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(levelk(dir.path(), &["best-response", "--coeffs", "0.4,0.4,0.2"]));
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["levels"], serde_json::json!([1, 2]));
    assert_eq!(v["strategy"], serde_json::json!([0.0, 0.5, 0.5, 0.0]));
}

#[test]
fn best_response_rejects_non_simplex_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = levelk(dir.path(), &["best-response", "--coeffs", "0.7,0.7"]);
    assert!(!out.status.success());
}

#[test]
fn no_train_without_models_points_at_build_gp() {
    let dir = tempfile::tempdir().unwrap();
    let out = levelk(dir.path(), &["pipeline", "--no-train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("build-gp"), "{err}");
}

#[test]
fn staged_commands_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(levelk(out, &["train-levels"]));
    assert!(out.join("levels.json").is_file());
    ok(levelk(out, &["build-gp", "--top", "4"]));
    assert_eq!(std::fs::read_dir(out.join("models")).unwrap().count(), 4);

    let synth = out.join("synth.json");
    let csv = out.join("synth.csv");
    ok(levelk(
        out,
        &["synthesize", "--level", "1.37", "--samples", "200", "--driver-id", "9", "--out", synth.to_str().unwrap(), "--csv", csv.to_str().unwrap()],
    ));
    let ingested = out.join("ingested.json");
    ok(levelk(out, &["ingest", csv.to_str().unwrap(), "--out", ingested.to_str().unwrap()]));
    assert_eq!(read_json(&synth), read_json(&ingested));

    let cgt = out.join("c.json");
    let dgt = out.join("d.json");
    ok(levelk(
        out,
        &["fit-drivers", "--data", synth.to_str().unwrap(), "--out", cgt.to_str().unwrap(), "--dgt-out", dgt.to_str().unwrap()],
    ));
    let report = read_json(&cgt);
    let states = report[0]["states"].as_array().unwrap();
    assert_eq!(states.len(), 4);
    for s in states {
        let l = s["l_opt"].as_f64().unwrap();
        assert!((0.0..=3.0).contains(&l));
    }

    ok(levelk(out, &["report", "--cgt", cgt.to_str().unwrap(), "--dgt", dgt.to_str().unwrap()]));
    for f in ["summary.json", "fig2_success.csv", "fig3_grid.csv", "fig4_scatter.csv", "fig5_intervals.csv", "table1.csv"] {
        assert!(out.join("report").join(f).is_file(), "missing {f}");
    }
}
