use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cto_lab::cli::pipeline::{sha256_file, Manifest, RunSummary};
use cto_lab::design_space::latin_hypercube;
use cto_lab::models::{sample_model, ComputerModel};
use tempfile::TempDir;

const SHORT_CHAIN: &str = r#""mcmc": {"iterations": 1200, "burn_in": 600, "chains": 2}"#;

fn cto_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cto-lab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes 40 runs of the builtin example as a tabulated CSV and returns its config stanza.
fn tabulated_model(dir: &Path) -> String {
    let model = ComputerModel::simulated_example();
    let ds = sample_model(&model, &latin_hypercube(40, 3, 9).unwrap()).unwrap();
    let space = model.space();
    let mut w = csv::Writer::from_path(dir.join("runs.csv")).unwrap();
    w.write_record(["x", "theta1", "theta2", "y1", "y2", "y3"]).unwrap();
    for r in 0..ds.n() {
        let unit: Vec<f64> = ds.inputs().row(r).iter().copied().collect();
        let mut row: Vec<String> = space.unscale(&unit).unwrap().iter().map(f64::to_string).collect();
        row.extend((0..3).map(|i| ds.outputs()[(r, i)].to_string()));
        w.write_record(&row).unwrap();
    }
    w.flush().unwrap();
    r#"{"csv": "runs.csv", "variables": [
        {"name": "x", "lower": 1.95, "upper": 2.05, "kind": "control"},
        {"name": "theta1", "lower": 0, "upper": 3, "kind": "design"},
        {"name": "theta2", "lower": 0, "upper": 6, "kind": "design"}]}"#
        .to_string()
}

#[test]
fn misspelled_key_suggests_the_real_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"model": {"builtin": "simulated_example"}, "sigma": "sampled"}"#);
    let out = cto_lab(&["cto", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("sigma") && err.contains("noise"), "{err}");
}

#[test]
fn cto_on_tabulated_runs_requires_emulate() {
    let dir = TempDir::new().unwrap();
    let model = tabulated_model(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{"model": {model}, "target": [0.73, 0.67, 15], {SHORT_CHAIN}}}"#),
    );
    let out = cto_lab(&["cto", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("emulate"), "{}", stderr(&out));
    // the log records the failure too
    let log = fs::read_to_string(dir.path().join("out/run.log")).unwrap();
    assert!(log.contains("emulate"), "{log}");
}

#[test]
fn ray_target_requires_prelim() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{"model": {{"builtin": "simulated_example"}}, "target": "ray", {SHORT_CHAIN}}}"#),
    );
    let out = cto_lab(&["cto", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("prelim"), "{}", stderr(&out));
}

#[test]
fn emulate_then_cto_on_tabulated_runs() {
    let dir = TempDir::new().unwrap();
    let model = tabulated_model(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"{{"model": {model}, "target": [0.73, 0.67, 15], "seed": 4,
                "emulator": {{"starts": 3}}, {SHORT_CHAIN}}}"#
        ),
    );
    let cfg = cfg.to_str().unwrap();
    let emulate = cto_lab(&["emulate", "--config", cfg]);
    assert_eq!(emulate.status.code(), Some(0), "{}", stderr(&emulate));
    let out_dir = dir.path().join("alt");
    let cto = cto_lab(&["cto", "--config", cfg, "--out", out_dir.to_str().unwrap()]);
    // a different output directory has no emulator
    assert_eq!(cto.status.code(), Some(1));

    let cto = cto_lab(&["cto", "--config", cfg]);
    assert!(cto.status.code() == Some(0) || cto.status.code() == Some(2), "{}", stderr(&cto));
    let out = dir.path().join("out");

    let summary: RunSummary = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.output_names, vec!["y1", "y2", "y3"]);
    assert_eq!(summary.theta.len(), 2);
    assert_eq!(summary.draws, 2 * 600);
    for t in &summary.theta {
        assert!((0.0..=1.0).contains(&t.mean_unit), "{t:?}");
    }

    let mut draws = csv::Reader::from_path(out.join("draws.csv")).unwrap();
    let header: Vec<String> = draws.headers().unwrap().iter().map(str::to_string).collect();
    assert!(header.contains(&"theta1".to_string()) && header.contains(&"theta2".to_string()), "{header:?}");
    let rows: Vec<csv::StringRecord> = draws.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), summary.draws);
    for row in &rows {
        for cell in row.iter() {
            let _: f64 = cell.parse().unwrap();
        }
    }

    let mut predictive = csv::Reader::from_path(out.join("predictive.csv")).unwrap();
    let header = predictive.headers().unwrap().clone();
    assert_eq!(header.len(), 2 + 3 * summary.control_grid.len());
    assert_eq!((&header[0], &header[1], &header[2]), ("chain", "iteration", "y1@0"));
    assert_eq!(predictive.records().count(), summary.draws);

    let manifest: Manifest = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    for name in ["draws.csv", "predictive.csv", "summary.json", "run.log"] {
        assert!(manifest.files.iter().any(|f| f.name == name), "{name} missing from manifest");
    }
    for entry in &manifest.files {
        let path = out.join(&entry.name);
        assert_eq!(sha256_file(&path).unwrap(), entry.sha256, "{}", entry.name);
        assert_eq!(fs::metadata(&path).unwrap().len(), entry.bytes);
    }
}

#[test]
fn unconverged_chains_exit_with_status_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"builtin": "simulated_example"}, "target": [0.73, 0.67, 15], "seed": 3,
            "mcmc": {"iterations": 12, "burn_in": 2, "chains": 6}}"#,
    );
    let out = cto_lab(&["cto", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("not converged"));
    let summary: RunSummary =
        serde_json::from_slice(&fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert!(!summary.converged);
    assert!(summary.max_rhat.unwrap() > 1.1);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"builtin": "simulated_example"}, "target": [0.73, 0.67, 15], "seed": 3,
            "mcmc": {"iterations": 300, "burn_in": 100, "chains": 2}}"#,
    );
    let out = cto_lab(&["cto", "--config", cfg.to_str().unwrap(), "--seed", "77"]);
    assert!(out.status.code() != Some(1), "{}", stderr(&out));
    let summary: RunSummary =
        serde_json::from_slice(&fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.seed, 77);
}
