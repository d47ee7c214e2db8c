//! File layout and JSON records shared between commands.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bjmd::experiment::Engine;
use bjmd::{FitReport, ModelState, SolverConfig};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::io;

pub const REPORT: &str = "report.json";
pub const SIGMA2: &str = "sigma2.json";
pub const TRACE: &str = "trace.csv";

pub fn h_file(c: usize) -> String {
    format!("H_{}.csv", c + 1)
}

pub fn x_file(c: usize) -> String {
    format!("X_{}.csv", c + 1)
}

pub fn labels_file(c: usize) -> String {
    format!("labels_{}.csv", c + 1)
}

pub fn run_dir(i: usize) -> PathBuf {
    PathBuf::from("runs").join(format!("{i:02}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceNoise {
    pub name: String,
    pub sigma2: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma2File {
    pub sources: Vec<SourceNoise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptRun {
    pub seed: u64,
    pub score: f64,
    pub dir: PathBuf,
    pub converged: bool,
    pub iterations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReportFile {
    pub manifest: PathBuf,
    pub engine: Engine,
    pub seed: u64,
    pub restarts: usize,
    pub keep_best: usize,
    pub config: SolverConfig,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub source_names: Vec<String>,
    /// Convergence of the best run.
    pub converged: bool,
    pub iterations: usize,
    pub wall_seconds: f64,
    /// Best first. Every directory holds a full set of fit files; the best
    /// run's files are also copied to the top level.
    pub kept_runs: Vec<KeptRun>,
    pub failures: Vec<Failure>,
    pub error: Option<String>,
}

pub fn config_hash(config: &SolverConfig) -> Result<String> {
    Ok(io::sha256_hex(serde_json::to_string(config)?.as_bytes()))
}

/// Writes W, every H_c, sigma2.json and trace.csv for one run into `dir`.
pub fn write_fit(
    dir: &Path,
    names: &[String],
    engine: Engine,
    config: &SolverConfig,
    state: &ModelState,
    report: &FitReport,
) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_matrix(&dir.join("W.csv"), &state.w)?;
    for (c, h) in state.h.iter().enumerate() {
        io::write_matrix(&dir.join(h_file(c)), h)?;
    }
    let sources = names
        .iter()
        .zip(&state.sigma2)
        .map(|(name, s2)| SourceNoise { name: name.clone(), sigma2: *s2, sigma: s2.sqrt() })
        .collect();
    io::write_json(&dir.join(SIGMA2), &Sigma2File { sources })?;

    let mut w = csv::Writer::from_path(dir.join(TRACE))?;
    let value_name = match engine {
        Engine::Map => "objective",
        Engine::Advi => "elbo",
    };
    w.write_record(["iteration", value_name, "elapsed_seconds"])?;
    for (i, (v, t)) in report.objective_trace.iter().zip(&report.trace_seconds).enumerate() {
        let iteration = match engine {
            Engine::Map => i,
            // VI records once per check window; the last window may be short.
            Engine::Advi => ((i + 1) * config.check_interval).min(report.iterations),
        };
        w.write_record([iteration.to_string(), format!("{v:.16e}"), format!("{t:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_h(dir: &Path, n_sources: usize) -> Result<Vec<DMatrix<f64>>> {
    (0..n_sources).map(|c| io::read_matrix(&dir.join(h_file(c)))).collect()
}

pub fn read_report(fit_dir: &Path) -> Result<FitReportFile> {
    io::read_json(&fit_dir.join(REPORT)).with_context(|| format!("{} is not a fit directory", fit_dir.display()))
}
