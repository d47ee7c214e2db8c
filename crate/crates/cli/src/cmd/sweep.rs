use std::path::PathBuf;

use anyhow::Result;
use bjmd::datagen::SynthSpec;
use bjmd::experiment::{run_sweep, Engine, SweepPlan, Variant};

use super::Outcome;

pub struct Request {
    pub base: SynthSpec,
    pub sigma3: Vec<f64>,
    pub engines: Vec<Engine>,
    pub variants: Vec<Variant>,
    pub restarts: usize,
    pub keep_best: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn run(req: Request) -> Result<Outcome> {
    let mut plan = SweepPlan::standard(req.base);
    plan.sigma3 = req.sigma3;
    plan.engines = req.engines;
    plan.variants = req.variants;
    plan.restarts = req.restarts;
    plan.keep_best = req.keep_best;
    if let Some(s) = req.seed {
        plan.seed = s;
    }
    log::info!(
        "sweeping {} noise levels x {} engines x {} variants",
        plan.sigma3.len(),
        plan.engines.len(),
        plan.variants.len()
    );
    let rows = run_sweep(&plan)?;

    let path = req.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["sigma3", "engine", "variant", "source", "auc", "seconds", "error"])?;
    let mut failed = 0;
    for r in &rows {
        failed += r.error.is_some() as usize;
        w.write_record([
            r.sigma3.to_string(),
            r.engine.to_string(),
            r.variant.to_string(),
            r.source.to_string(),
            r.auc.map(|a| format!("{a:.2}")).unwrap_or_default(),
            format!("{:.3}", r.seconds),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    log::info!("wrote {} rows to {}", rows.len(), path.display());
    if failed > 0 {
        log::warn!("{failed} rows come from failed cells");
        return Ok(Outcome::SolverFailure);
    }
    Ok(Outcome::Success)
}
