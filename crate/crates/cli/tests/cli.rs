use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bjmd::datagen::{gen_dataset, SynthSpec};
use bjmd::evaluation::{cluster_metric, LabelMatrix};
use nalgebra::DMatrix;
use serde_json::Value;

fn bjmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bjmd")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = bjmd(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(p: &Path) -> DMatrix<f64> {
    let text = fs::read_to_string(p).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().map(|l| l.split(',').map(|v| v.trim().parse().unwrap()).collect()).collect();
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

fn write_csv(p: &Path, m: &DMatrix<f64>) {
    let mut text = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(p, text).unwrap();
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--preset", "small", "--sigma3", "4", "--seed", &seed.to_string(), "--out", s(&data)]);
    data
}

#[test]
fn synth_writes_small_scale_sources_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), 1);
    for c in 1..=3 {
        let x = read_csv(&a.join(format!("X_{c}.csv")));
        assert_eq!((x.nrows(), x.ncols()), (105, 120));
        assert!(a.join(format!("H_true_{c}.csv")).is_file());
        assert!(a.join(format!("labels_{c}.csv")).is_file());
    }
    assert_eq!(read_csv(&a.join("W_true.csv")).shape(), (105, 5));
    assert_eq!(json(&a.join("provenance.json"))["seed"], 1);

    let b = tmp.path().join("again");
    ok(&["synth", "--preset", "small", "--sigma3", "4", "--seed", "1", "--out", s(&b)]);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn synth_files_equal_the_in_memory_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth(tmp.path(), 7);
    let ds = gen_dataset(&SynthSpec::small_scale(4.0).with_seed(7)).unwrap();
    assert_eq!(read_csv(&dir.join("W_true.csv")), ds.w_true);
    for c in 0..3 {
        assert_eq!(&read_csv(&dir.join(format!("X_{}.csv", c + 1))), ds.data.source(c));
        assert_eq!(read_csv(&dir.join(format!("H_true_{}.csv", c + 1))), ds.h_true[c]);
        let labels = read_csv(&dir.join(format!("labels_{}.csv", c + 1)));
        let l = &ds.labels[c];
        assert_eq!(labels.shape(), (l.nrows(), l.ncols()));
        for (i, j) in (0..l.nrows()).flat_map(|i| (0..l.ncols()).map(move |j| (i, j))) {
            assert_eq!(labels[(i, j)], l.get(i, j) as f64);
        }
    }
}

#[test]
fn synth_rejects_invalid_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, "a = 2.0\nk = 5\nl = 30\ncoh = 30\nn_samples = 10\np = 0.3\nsigmas = [1.0]\n").unwrap();
    let out = bjmd(&["synth", "--spec", s(&spec), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("coh"));

    fs::write(&spec, "a = 2.0\nk = 5\n").unwrap();
    let out = bjmd(&["synth", "--spec", s(&spec), "--out", s(&tmp.path().join("o"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("spec.toml"));
}

#[test]
fn map_fit_recovers_noise_and_trace_decreases() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 1);
    let fit = tmp.path().join("fit");
    ok(&["fit", "--manifest", s(&data.join("manifest.toml")), "--engine", "map", "--out", s(&fit)]);

    let trace = fs::read_to_string(fit.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iteration,objective,elapsed_seconds"));
    let obj: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(obj.len() > 2);
    for w in obj.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }

    let sig = json(&fit.join("sigma2.json"));
    for (c, truth) in [1.0, 2.5, 4.0].iter().enumerate() {
        let est = sig["sources"][c]["sigma"].as_f64().unwrap();
        let s2 = sig["sources"][c]["sigma2"].as_f64().unwrap();
        assert!((est - truth).abs() / truth < 0.1, "source {c}: {est}");
        assert_eq!(est, s2.sqrt());
    }

    let report = json(&fit.join("report.json"));
    assert_eq!(report["seed"], 1);
    assert_eq!(report["engine"], "map");
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert!(report["error"].is_null());
    assert_eq!(read_csv(&fit.join("W.csv")).shape(), (105, 5));
}

#[test]
fn restarts_keep_the_best_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 2);
    let fit = tmp.path().join("fit");
    let m = data.join("manifest.toml");
    ok(&["fit", "--manifest", s(&m), "--restarts", "6", "--keep-best", "3", "--seed", "40", "--out", s(&fit)]);
    let report = json(&fit.join("report.json"));
    let kept = report["kept_runs"].as_array().unwrap();
    assert_eq!(kept.len(), 3);
    let scores: Vec<f64> = kept.iter().map(|k| k["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    for k in kept {
        let seed = k["seed"].as_u64().unwrap();
        assert!((40..46).contains(&seed));
        assert!(fit.join(k["dir"].as_str().unwrap()).join("H_1.csv").is_file());
    }
    assert_eq!(fs::read(fit.join("H_2.csv")).unwrap(), fs::read(fit.join("runs/00/H_2.csv")).unwrap());

    let again = tmp.path().join("again");
    ok(&["fit", "--manifest", s(&m), "--restarts", "6", "--keep-best", "3", "--seed", "40", "--out", s(&again)]);
    assert_eq!(fs::read(fit.join("H_1.csv")).unwrap(), fs::read(again.join("H_1.csv")).unwrap());
    assert_eq!(json(&again.join("report.json"))["config_hash"], report["config_hash"]);
}

#[test]
fn solver_failure_exits_nonzero_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 3);
    let m = data.join("manifest.toml");
    let mut text = fs::read_to_string(&m).unwrap();
    text.push_str("step_size = 1e300\ncheck_interval = 1\nmax_outer_iters = 50\n");
    fs::write(&m, text).unwrap();
    let fit = tmp.path().join("fit");
    let out = bjmd(&["fit", "--manifest", s(&m), "--engine", "advi", "--out", s(&fit)]);
    assert!(!out.status.success());
    let report = json(&fit.join("report.json"));
    assert!(report["error"].as_str().unwrap().contains("restarts failed"));
}

#[test]
fn eval_matches_library_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 4);
    let fit = tmp.path().join("fit");
    ok(&["fit", "--manifest", s(&data.join("manifest.toml")), "--out", s(&fit)]);
    ok(&["eval", "--fit-dir", s(&fit), "--out", s(&fit)]);
    let metrics = json(&fit.join("metrics.json"));
    for c in 0..3 {
        let h = read_csv(&fit.join(format!("H_{}.csv", c + 1)));
        let l = read_csv(&data.join(format!("labels_{}.csv", c + 1)));
        let labels = LabelMatrix::new(l.map(|v| v as u8)).unwrap();
        let lib = cluster_metric(&h, &labels).unwrap();
        let src = &metrics["sources"][c];
        assert_eq!(src["r"].as_f64().unwrap(), lib.average);
        assert_eq!(src["runs"][0]["excluded_rows"].as_u64().unwrap() as usize, lib.excluded_rows);
        let auc = src["auc"].as_f64().unwrap();
        assert_eq!(auc, (lib.average * 10_000.0).round() / 100.0);
    }
}

#[test]
fn eval_scores_perfect_and_constant_coefficients() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 5);
    let fit = tmp.path().join("fit");
    ok(&["fit", "--manifest", s(&data.join("manifest.toml")), "--out", s(&fit)]);
    for c in 1..=3 {
        let labels = read_csv(&data.join(format!("labels_{c}.csv")));
        let h = if c == 3 { DMatrix::from_element(labels.nrows(), labels.ncols(), 0.2) } else { labels };
        write_csv(&fit.join(format!("H_{c}.csv")), &h);
    }
    ok(&["eval", "--fit-dir", s(&fit), "--out", s(&fit)]);
    let metrics = json(&fit.join("metrics.json"));
    let aucs: Vec<f64> = (0..3).map(|c| metrics["sources"][c]["auc"].as_f64().unwrap()).collect();
    assert_eq!(aucs, vec![100.0, 100.0, 50.0]);

    write_csv(&fit.join("H_1.csv"), &DMatrix::from_element(4, 4, 0.25));
    let out = bjmd(&["eval", "--fit-dir", s(&fit), "--out", s(&fit)]);
    assert!(!out.status.success());
}

#[test]
fn sweep_writes_long_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--preset", "small", "--sigma3", "1.5,5.5", "--restarts", "2", "--keep-best", "1", "--out", s(&out)]);
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sigma3,engine,variant,source,auc,seconds,error"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 3);
    for r in &rows {
        let auc: f64 = r[4].parse().unwrap();
        assert!((0.0..=100.0).contains(&auc));
        assert!(r[6].is_empty());
    }
}

/// Writes a manifest over `x` with one source per matrix and a sigma2.json
/// claiming unit noise.
fn selection_fixture(dir: &Path, xs: &[DMatrix<f64>]) -> (PathBuf, PathBuf) {
    let mut manifest = String::from("k = 2\n");
    let mut sig = Vec::new();
    for (c, x) in xs.iter().enumerate() {
        write_csv(&dir.join(format!("X_{c}.csv")), x);
        manifest.push_str(&format!("\n[[sources]]\nname = \"s{c}\"\nmatrix = \"X_{c}.csv\"\n"));
        sig.push(serde_json::json!({"name": format!("s{c}"), "sigma2": 1.0, "sigma": 1.0}));
    }
    let m = dir.join("manifest.toml");
    fs::write(&m, manifest).unwrap();
    let fit = dir.join("fit");
    fs::create_dir_all(&fit).unwrap();
    fs::write(fit.join("sigma2.json"), serde_json::json!({ "sources": sig }).to_string()).unwrap();
    (m, fit)
}

fn noise(rows: usize, cols: usize, state: &mut u64) -> DMatrix<f64> {
    // Box-Muller over a 64-bit LCG keeps the fixture free of extra crates.
    let mut uniform = || {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    DMatrix::from_fn(rows, cols, |_, _| {
        let (u, v) = (uniform(), uniform());
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    })
}

#[test]
fn select_keeps_planted_rows_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut state = 11;
    let mut xs = vec![noise(200, 60, &mut state), noise(200, 40, &mut state)];
    for x in &mut xs {
        for i in [3, 50, 120] {
            x.row_mut(i).scale_mut(10.0);
        }
    }
    let (m, fit) = selection_fixture(tmp.path(), &xs);
    let out = tmp.path().join("sel");
    ok(&["select", "--manifest", s(&m), "--fit-dir", s(&fit), "--alpha", "0.05", "--out", s(&out)]);
    let report = json(&out.join("selection.json"));
    let selected: Vec<u64> = report["selected"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(selected, vec![3, 50, 120]);
    let filtered = read_csv(&out.join("selected_X_2.csv"));
    assert_eq!(filtered.shape(), (3, 40));
    assert_eq!(filtered.row(1), xs[1].row(50));
    assert!(out.join("manifest.toml").is_file());

    let again = tmp.path().join("again");
    ok(&["select", "--manifest", s(&m), "--fit-dir", s(&fit), "--alpha", "0.05", "--out", s(&again)]);
    assert_eq!(fs::read(out.join("selection.json")).unwrap(), fs::read(again.join("selection.json")).unwrap());
}

#[test]
fn select_on_pure_noise_is_near_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let mut state = 5;
    let xs = vec![noise(500, 80, &mut state), noise(500, 80, &mut state)];
    let (m, fit) = selection_fixture(tmp.path(), &xs);
    let out = tmp.path().join("sel");
    ok(&["select", "--manifest", s(&m), "--fit-dir", s(&fit), "--select-mode", "all", "--out", s(&out)]);
    let n = json(&out.join("selection.json"))["selected"].as_array().unwrap().len();
    assert!(n <= 2, "{n} rows selected from pure noise");
    if n == 0 {
        let text = fs::read_to_string(out.join("manifest.toml")).unwrap();
        assert!(text.contains(s(&fs::canonicalize(tmp.path()).unwrap())));
    }
}
