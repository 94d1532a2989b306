mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use common::{normals, uniform};

fn sddr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sddr")).args(args).output().unwrap()
}

fn write_data(dir: &Path, n: usize) -> PathBuf {
    let x = uniform(1, n, -1.0, 1.0);
    let z = uniform(2, n, 0.0, 1.0);
    let e = normals(3, n);
    let mut text = String::from("x,z,y\n");
    for i in 0..n {
        text.push_str(&format!("{},{},{}\n", x[i], z[i], 1.0 + x[i] + (3.0 * z[i]).sin() + 0.3 * e[i]));
    }
    let path = dir.join("data.csv");
    std::fs::write(&path, text).unwrap();
    path
}

fn base_config() -> Value {
    json!({
        "data": {"csv_path": "data.csv", "response": "y"},
        "family": "normal",
        "formulas": {"loc": "~ 1 + x + s(z, df = 5) + dnn(x, z)", "scale": "~ 1"},
        "networks": {"dnn": [
            {"type": "dense", "units": 4, "activation": "tanh"},
            {"type": "dropout", "rate": 0.1},
            {"type": "dense", "units": 1}
        ]},
        "train": {"epochs": 8, "batch_size": 32, "optimizer": {"name": "adam", "lr": 0.01}},
        "seed": 3,
        "output_dir": "out",
        "predict": {"statistics": ["mean", "stddev", "quantile", "density_grid"], "probs": [0.1, 0.5, 0.9], "grid_points": 101},
        "cv": {"folds": 3},
        "ensemble": {"n_ensemble": 5, "predict_newdata": "data.csv"}
    })
}

fn setup(config: &Value) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 120);
    let path = dir.path().join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    (dir, path)
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        // empty fields mark absent values such as a missing validation loss
        .map(|rec| {
            rec.unwrap()
                .iter()
                .map(|v| if v.is_empty() { f64::NAN } else { v.parse().unwrap() })
                .collect()
        })
        .collect();
    (header, rows)
}

#[test]
fn fit_then_predict() {
    let (dir, cfg) = setup(&base_config());
    let c = cfg.to_str().unwrap();
    let out = sddr(&["fit", "--config", c]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let od = dir.path().join("out");
    for f in ["model.json", "history.csv", "coefficients.json", "summary.json", "partial_effects/loc_s_z_df_5.csv"] {
        assert!(od.join(f).is_file(), "missing {f}");
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(od.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs_run"], 8);
    let coefs: Value = serde_json::from_str(&std::fs::read_to_string(od.join("coefficients.json")).unwrap()).unwrap();
    assert!(coefs["loc"]["linear"]["x"].is_f64());
    assert_eq!(coefs["loc"]["smooth"]["s(z, df=5)"].as_array().unwrap().len(), 9);
    let (header, hist) = read_csv(&od.join("history.csv"));
    assert_eq!(header[0], "epoch");
    assert_eq!(hist.len(), 8);

    let out = sddr(&["predict", "--config", c]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&od.join("predictions.csv"));
    assert_eq!(header, vec!["row", "mean", "stddev", "q0.1", "q0.5", "q0.9"]);
    assert_eq!(rows.len(), 120);
    for r in &rows {
        assert!(r[3] < r[4] && r[4] < r[5]);
        // the normal median is its mean
        assert!((r[4] - r[1]).abs() < 1e-9);
    }
    let (_, grid) = read_csv(&od.join("density_grid.csv"));
    assert_eq!(grid.len(), 120 * 101);
    let first: Vec<&Vec<f64>> = grid.iter().filter(|r| r[0] == 1.0).collect();
    let mass: f64 = first.windows(2).map(|w| 0.5 * (w[0][2] + w[1][2]) * (w[1][1] - w[0][1])).sum();
    assert!((mass - 1.0).abs() < 1e-3, "density mass {mass}");

    // CLI flags override the config
    let model = od.join("model.json");
    let p2 = od.join("p2");
    let args = ["predict", "--config", c, "--statistic", "mean", "--model", model.to_str().unwrap(), "--out", p2.to_str().unwrap()];
    let out = sddr(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, _) = read_csv(&od.join("p2/predictions.csv"));
    assert_eq!(header, vec!["row", "mean"]);
}

#[test]
fn cv_and_ensemble_artifacts() {
    let (dir, cfg) = setup(&base_config());
    let c = cfg.to_str().unwrap();
    let out = sddr(&["cv", "--config", c]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let od = dir.path().join("out");
    let cv: Value = serde_json::from_str(&std::fs::read_to_string(od.join("cv_summary.json")).unwrap()).unwrap();
    assert_eq!(cv["test_sizes"], json!([40, 40, 40]));
    assert!(od.join("cv_history.csv").is_file());

    let out = sddr(&["ensemble", "--config", c]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 1..=5 {
        assert!(od.join(format!("member_{i}.json")).is_file());
    }
    let (_, rows) = read_csv(&od.join("ensemble_predictions.csv"));
    assert_eq!(rows.len(), 120);
    assert!(od.join("ensemble.json").is_file());
}

#[test]
fn inspect_prints_the_compiled_model() {
    let (_dir, cfg) = setup(&base_config());
    let out = sddr(&["inspect", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.is_object());
}

#[test]
fn config_errors_exit_2() {
    let mut cfg = base_config();
    cfg["unknown_key"] = json!(1);
    let (_d, path) = setup(&cfg);
    let out = sddr(&["fit", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["code"], 2);

    let mut cfg = base_config();
    cfg["cv"]["folds"] = json!(1);
    let (_d, path) = setup(&cfg);
    let out = sddr(&["cv", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let mut cfg = base_config();
    cfg["formulas"]["loc"] = json!("~ 1 + + x");
    let (_d, path) = setup(&cfg);
    assert_eq!(sddr(&["fit", "--config", path.to_str().unwrap()]).status.code(), Some(2));

    let out = sddr(&["fit", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(sddr(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_3_and_name_the_column() {
    let mut cfg = base_config();
    cfg["formulas"]["loc"] = json!("~ 1 + x + missing_var");
    let (_d, path) = setup(&cfg);
    let out = sddr(&["fit", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_json(&out);
    assert_eq!(err["error"]["code"], 3);
    assert!(err["error"]["message"].as_str().unwrap().contains("missing_var"));

    let mut cfg = base_config();
    cfg["family"] = json!("poisson");
    cfg["formulas"] = json!({"rate": "~ 1 + x"});
    let (_d, path) = setup(&cfg);
    assert_eq!(sddr(&["fit", "--config", path.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn numeric_failure_exits_4() {
    let mut cfg = base_config();
    cfg["train"]["optimizer"] = json!({"name": "sgd", "lr": 1e200});
    cfg["formulas"] = json!({"loc": "~ 1 + x", "scale": "~ 1"});
    let (_d, path) = setup(&cfg);
    let out = sddr(&["fit", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["error"]["code"], 4);
}

#[test]
fn seed_flag_changes_the_fit() {
    let (dir, cfg) = setup(&base_config());
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(sddr(&["fit", "--config", c, "--out", a.to_str().unwrap(), "--seed", "1"]).status.code(), Some(0));
    assert_eq!(sddr(&["fit", "--config", c, "--out", b.to_str().unwrap(), "--seed", "2"]).status.code(), Some(0));
    let ha = std::fs::read(a.join("history.csv")).unwrap();
    let hb = std::fs::read(b.join("history.csv")).unwrap();
    assert_ne!(ha, hb);
}
