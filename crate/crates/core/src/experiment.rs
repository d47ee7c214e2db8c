//! Experiment protocol: random restarts with best-k selection, the
//! column-concatenated ablation and σ₃ sweeps over the synthetic benchmark.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::advi::fit_advi;
use crate::datagen::{gen_dataset, SynthSpec};
use crate::error::{BjmdError, Result};
use crate::evaluation::{cluster_metric, LabelMatrix};
use crate::map_solver::fit_map;
use crate::model::{FitReport, Hyperparams, ModelState, MultiViewData, SolverConfig};
use crate::par;

/// Inference engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Map,
    Advi,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Map => "map",
            Engine::Advi => "advi",
        }
    }

    pub fn default_config(self) -> SolverConfig {
        match self {
            Engine::Map => SolverConfig::map(),
            Engine::Advi => SolverConfig::advi(),
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = BjmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(Engine::Map),
            "advi" | "vi" => Ok(Engine::Advi),
            other => Err(BjmdError::InvalidSpec(format!("unknown engine '{other}' (expected map or advi)"))),
        }
    }
}

/// Multi-source model or the single-source fit of the concatenated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Bjmd,
    Concat,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bjmd => "bjmd",
            Variant::Concat => "concat",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineFit {
    pub engine: Engine,
    pub seed: u64,
    pub state: ModelState,
    pub report: FitReport,
    /// Ranking score, higher is better: negated final objective for MAP,
    /// final ELBO window mean for VI.
    pub score: f64,
}

pub fn fit_engine(
    engine: Engine,
    data: &MultiViewData,
    hyper: &Hyperparams,
    config: &SolverConfig,
    seed: u64,
) -> Result<EngineFit> {
    match engine {
        Engine::Map => {
            let fit = fit_map(data, hyper, &config.clone().with_seed(seed), None)?;
            let score = -fit.report.objective_trace.last().copied().unwrap_or(f64::INFINITY);
            Ok(EngineFit { engine, seed, state: fit.state, report: fit.report, score })
        }
        Engine::Advi => {
            let fit = fit_advi(data, hyper, config, seed)?;
            Ok(EngineFit { engine, seed, state: fit.extracted, report: fit.report, score: fit.final_elbo })
        }
    }
}

/// Runs kept by [`fit_restarts`] plus the seeds that failed.
#[derive(Debug, Clone)]
pub struct Restarts {
    /// Best runs first.
    pub kept: Vec<EngineFit>,
    pub scores: Vec<(u64, f64)>,
    pub failures: Vec<(u64, String)>,
}

/// Fits seeds `base_seed..base_seed+restarts` and keeps the `keep_best`
/// highest-scoring runs. Fails only if every restart fails.
pub fn fit_restarts(
    engine: Engine,
    data: &MultiViewData,
    hyper: &Hyperparams,
    config: &SolverConfig,
    restarts: usize,
    keep_best: usize,
    base_seed: u64,
) -> Result<Restarts> {
    if restarts == 0 || keep_best == 0 || keep_best > restarts {
        return Err(BjmdError::InvalidSpec(format!(
            "need 1 <= keep_best <= restarts, got keep_best={keep_best} restarts={restarts}"
        )));
    }
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for r in 0..restarts as u64 {
        let seed = base_seed.wrapping_add(r);
        match fit_engine(engine, data, hyper, config, seed) {
            Ok(f) if f.score.is_finite() => fits.push(f),
            Ok(f) => failures.push((seed, format!("non-finite score {}", f.score))),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    if fits.is_empty() {
        let first = failures.first().map(|f| f.1.clone()).unwrap_or_default();
        return Err(BjmdError::Divergence(format!("all {restarts} restarts failed; first error: {first}")));
    }
    fits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.seed.cmp(&b.seed)));
    let scores = fits.iter().map(|f| (f.seed, f.score)).collect();
    fits.truncate(keep_best);
    Ok(Restarts { kept: fits, scores, failures })
}

/// Splits the coefficients of a concatenated fit back into per-source blocks.
pub fn split_columns(h: &DMatrix<f64>, counts: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    if counts.iter().sum::<usize>() != h.ncols() {
        return Err(BjmdError::Shape(format!("{} columns cannot be split as {counts:?}", h.ncols())));
    }
    let mut start = 0;
    Ok(counts
        .iter()
        .map(|&n| {
            let block = h.columns(start, n).into_owned();
            start += n;
            block
        })
        .collect())
}

/// Per-source cluster metric `r⁽ᶜ⁾ ∈ [0, 1]`.
pub fn evaluate_sources(h: &[DMatrix<f64>], labels: &[LabelMatrix]) -> Result<Vec<f64>> {
    if h.len() != labels.len() {
        return Err(BjmdError::Shape(format!("{} coefficient matrices, {} label sets", h.len(), labels.len())));
    }
    h.iter().zip(labels).map(|(hc, l)| cluster_metric(hc, l).map(|s| s.average)).collect()
}

/// Averages over the kept runs of the restart protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub engine: Engine,
    pub variant: Variant,
    /// Mean `r⁽ᶜ⁾` per source over kept runs.
    pub auc: Vec<f64>,
    /// Mean `√σ²` per fitted source over kept runs (one entry for `Concat`).
    pub sigma: Vec<f64>,
    pub seconds: f64,
    pub kept_seeds: Vec<u64>,
    pub failures: usize,
}

/// Restarts, keeps the best runs and scores them against `labels`. The
/// `Concat` variant fits the column-concatenated data as one source.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    engine: Engine,
    variant: Variant,
    data: &MultiViewData,
    labels: &[LabelMatrix],
    hyper: &Hyperparams,
    config: &SolverConfig,
    restarts: usize,
    keep_best: usize,
    base_seed: u64,
) -> Result<ProtocolResult> {
    let started = Instant::now();
    let fitted = match variant {
        Variant::Bjmd => data.clone(),
        Variant::Concat => data.concatenated(),
    };
    let runs = fit_restarts(engine, &fitted, hyper, config, restarts, keep_best, base_seed)?;
    let counts = data.sample_counts();
    let mut auc = vec![0.0; data.n_sources()];
    let mut sigma = vec![0.0; fitted.n_sources()];
    let inv = 1.0 / runs.kept.len() as f64;
    for fit in &runs.kept {
        let h = match variant {
            Variant::Bjmd => fit.state.h.clone(),
            Variant::Concat => split_columns(&fit.state.h[0], &counts)?,
        };
        for (a, r) in auc.iter_mut().zip(evaluate_sources(&h, labels)?) {
            *a += r * inv;
        }
        for (s, s2) in sigma.iter_mut().zip(&fit.state.sigma2) {
            *s += s2.sqrt() * inv;
        }
    }
    Ok(ProtocolResult {
        engine,
        variant,
        auc,
        sigma,
        seconds: started.elapsed().as_secs_f64(),
        kept_seeds: runs.kept.iter().map(|f| f.seed).collect(),
        failures: runs.failures.len(),
    })
}

/// Settings shared by every cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub base: SynthSpec,
    pub sigma3: Vec<f64>,
    pub engines: Vec<Engine>,
    pub variants: Vec<Variant>,
    pub hyper: Hyperparams,
    pub map_config: SolverConfig,
    pub advi_config: SolverConfig,
    pub restarts: usize,
    pub keep_best: usize,
    pub seed: u64,
}

impl SweepPlan {
    /// σ₃ ∈ {1.5, 2.0, …, 5.5} on `base`, MAP only, both variants.
    pub fn standard(base: SynthSpec) -> Self {
        let k = base.k;
        Self {
            base,
            sigma3: (0..9).map(|i| 1.5 + 0.5 * i as f64).collect(),
            engines: vec![Engine::Map],
            variants: vec![Variant::Bjmd, Variant::Concat],
            hyper: Hyperparams::with_k(k),
            map_config: SolverConfig::map(),
            advi_config: SolverConfig::advi(),
            restarts: 20,
            keep_best: 5,
            seed: 0,
        }
    }

    fn config(&self, engine: Engine) -> &SolverConfig {
        match engine {
            Engine::Map => &self.map_config,
            Engine::Advi => &self.advi_config,
        }
    }
}

/// One line of the long-format sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma3: f64,
    pub engine: Engine,
    pub variant: Variant,
    /// 1-based source index.
    pub source: usize,
    /// `r⁽ᶜ⁾ × 100`, absent when the cell failed.
    pub auc: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Replaces the last noise level of `base` by `sigma3`.
pub fn spec_for_sigma3(base: &SynthSpec, sigma3: f64) -> SynthSpec {
    let mut spec = base.clone();
    if let Some(last) = spec.sigmas.last_mut() {
        *last = sigma3;
    }
    spec
}

/// Runs every (σ₃, engine, variant) cell. A failing cell yields rows with an
/// error message and the sweep carries on. Rows come out ordered by σ₃,
/// engine, variant, source.
pub fn run_sweep(plan: &SweepPlan) -> Result<Vec<SweepRow>> {
    plan.base.validate()?;
    if plan.sigma3.is_empty() {
        return Err(BjmdError::InvalidSpec("sweep needs at least one sigma3 value".into()));
    }
    let mut cells = Vec::new();
    for &s3 in &plan.sigma3 {
        for &e in &plan.engines {
            for &v in &plan.variants {
                cells.push((s3, e, v));
            }
        }
    }
    let c = plan.base.n_sources();
    let rows = par::map_slice(&cells, plan.map_config.parallel, |&(s3, engine, variant)| {
        let started = Instant::now();
        let outcome = gen_dataset(&spec_for_sigma3(&plan.base, s3)).and_then(|ds| {
            run_protocol(
                engine,
                variant,
                &ds.data,
                &ds.labels,
                &plan.hyper,
                plan.config(engine),
                plan.restarts,
                plan.keep_best,
                plan.seed,
            )
        });
        let seconds = started.elapsed().as_secs_f64();
        (0..c)
            .map(|src| match &outcome {
                Ok(r) => SweepRow {
                    sigma3: s3,
                    engine,
                    variant,
                    source: src + 1,
                    auc: Some(r.auc[src] * 100.0),
                    seconds,
                    error: None,
                },
                Err(e) => SweepRow {
                    sigma3: s3,
                    engine,
                    variant,
                    source: src + 1,
                    auc: None,
                    seconds,
                    error: Some(e.to_string()),
                },
            })
            .collect::<Vec<_>>()
    });
    Ok(rows.into_iter().flatten().collect())
}
