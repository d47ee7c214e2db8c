use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use bjmd::experiment::{fit_restarts, Engine};

use super::Outcome;
use crate::artifacts::{self, config_hash, run_dir, write_fit, Failure, FitReportFile, KeptRun};
use crate::io;
use crate::manifest::Loaded;

pub fn run(
    manifest_path: &Path,
    engine: Option<Engine>,
    restarts: usize,
    keep_best: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<Outcome> {
    let loaded = Loaded::from_path(manifest_path)?;
    let m = &loaded.manifest;
    let engine = match engine {
        Some(e) => e,
        None => m.engine()?,
    };
    let config = m.solver_config(engine)?;
    let hyper = m.hyperparams()?;
    let data = loaded.data()?;
    let seed = seed.unwrap_or(m.seed);
    let names: Vec<String> = m.sources.iter().map(|s| s.name.clone()).collect();

    let mut report = FitReportFile {
        manifest: fs::canonicalize(manifest_path).unwrap_or_else(|_| manifest_path.to_path_buf()),
        engine,
        seed,
        restarts,
        keep_best,
        config_hash: config_hash(&config)?,
        config: config.clone(),
        source_names: names.clone(),
        converged: false,
        iterations: 0,
        wall_seconds: 0.0,
        kept_runs: Vec::new(),
        failures: Vec::new(),
        error: None,
    };

    log::info!("fitting {} sources with {engine}: {restarts} restarts from seed {seed}", names.len());
    let started = Instant::now();
    let outcome = fit_restarts(engine, &data, &hyper, &config, restarts, keep_best, seed);
    report.wall_seconds = started.elapsed().as_secs_f64();

    let fits = match outcome {
        Ok(r) => {
            report.failures = r.failures.into_iter().map(|(seed, error)| Failure { seed, error }).collect();
            r.kept
        }
        Err(e) => {
            log::error!("fit failed: {e}");
            report.error = Some(e.to_string());
            io::write_json(&out.join(artifacts::REPORT), &report)?;
            return Ok(Outcome::SolverFailure);
        }
    };

    let best = &fits[0];
    write_fit(out, &names, engine, &config, &best.state, &best.report)?;
    for (i, f) in fits.iter().enumerate() {
        let dir = if fits.len() == 1 { PathBuf::from(".") } else { run_dir(i) };
        if fits.len() > 1 {
            write_fit(&out.join(&dir), &names, engine, &config, &f.state, &f.report)
                .with_context(|| format!("writing run {i}"))?;
        }
        report.kept_runs.push(KeptRun {
            seed: f.seed,
            score: f.score,
            dir,
            converged: f.report.converged,
            iterations: f.report.iterations,
            seconds: f.report.elapsed_seconds,
        });
    }
    report.converged = best.report.converged;
    report.iterations = best.report.iterations;
    io::write_json(&out.join(artifacts::REPORT), &report)?;

    for f in &report.failures {
        log::warn!("restart with seed {} failed: {}", f.seed, f.error);
    }
    if !best.report.converged {
        log::warn!("best run stopped at the iteration cap without converging");
    }
    let sigmas: Vec<String> = best.state.sigma2.iter().map(|s| format!("{:.4}", s.sqrt())).collect();
    log::info!("best seed {} (score {:.6e}), sigma = [{}]", best.seed, best.score, sigmas.join(", "));
    Ok(if report.failures.is_empty() { Outcome::Success } else { Outcome::SolverFailure })
}
