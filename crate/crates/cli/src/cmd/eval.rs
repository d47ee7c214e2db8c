use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use bjmd::evaluation::{cluster_metric, LabelMatrix};
use serde::Serialize;

use super::Outcome;
use crate::artifacts::{read_h, read_report};
use crate::io::{self, percent};
use crate::manifest::Loaded;

#[derive(Debug, Serialize)]
struct RunMetric {
    seed: u64,
    r: f64,
    per_row: Vec<Option<f64>>,
    excluded_rows: usize,
}

#[derive(Debug, Serialize)]
struct SourceMetric {
    source: usize,
    name: String,
    /// Mean `r` over kept runs, ×100 with two decimals.
    auc: f64,
    r: f64,
    runs: Vec<RunMetric>,
}

#[derive(Debug, Serialize)]
struct Metrics {
    fit_dir: PathBuf,
    engine: String,
    sources: Vec<SourceMetric>,
}

fn load_labels(manifest: &Path, explicit: &[PathBuf]) -> Result<Vec<LabelMatrix>> {
    if !explicit.is_empty() {
        return explicit.iter().map(|p| io::read_labels(p)).collect();
    }
    Loaded::from_path(manifest)?
        .labels()?
        .with_context(|| format!("{} does not give labels for every source", manifest.display()))
}

pub fn run(fit_dir: &Path, manifest: Option<&Path>, labels: &[PathBuf], out: &Path) -> Result<Outcome> {
    let report = read_report(fit_dir)?;
    ensure!(report.error.is_none(), "fit in {} failed: {}", fit_dir.display(), report.error.unwrap_or_default());
    let labels = load_labels(manifest.unwrap_or(&report.manifest), labels)?;
    let c = report.source_names.len();
    ensure!(labels.len() == c, "fit has {c} sources but {} label matrices were given", labels.len());

    let mut sources: Vec<SourceMetric> = report
        .source_names
        .iter()
        .enumerate()
        .map(|(i, name)| SourceMetric { source: i + 1, name: name.clone(), auc: 0.0, r: 0.0, runs: Vec::new() })
        .collect();
    for run in &report.kept_runs {
        let h = read_h(&fit_dir.join(&run.dir), c)?;
        for (src, (hc, lc)) in sources.iter_mut().zip(h.iter().zip(&labels)) {
            ensure!(
                hc.ncols() == lc.ncols() && hc.nrows() == lc.nrows(),
                "source {}: H is {}x{} but labels are {}x{}",
                src.source,
                hc.nrows(),
                hc.ncols(),
                lc.nrows(),
                lc.ncols()
            );
            let score = cluster_metric(hc, lc).with_context(|| format!("scoring source {}", src.source))?;
            src.runs.push(RunMetric {
                seed: run.seed,
                r: score.average,
                per_row: score.per_row,
                excluded_rows: score.excluded_rows,
            });
        }
    }
    for s in &mut sources {
        s.r = s.runs.iter().map(|r| r.r).sum::<f64>() / s.runs.len() as f64;
        s.auc = percent(s.r);
        log::info!("{}: AUC {:.2}", s.name, s.auc);
    }
    let metrics = Metrics { fit_dir: fit_dir.to_path_buf(), engine: report.engine.to_string(), sources };
    io::write_json(&out.join("metrics.json"), &metrics)?;
    Ok(Outcome::Success)
}
