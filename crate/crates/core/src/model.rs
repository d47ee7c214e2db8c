//! Domain types shared by both inference engines, plus the two scalar
//! objectives: the reformulated negative log-posterior minimized by the MAP
//! engine and the log joint density of the original model used by the
//! variational engine.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{BjmdError, Result};

/// Tolerance on `|1ᵀh − 1|` for stored coefficient columns.
pub const COLUMN_SUM_TOL: f64 = 1e-8;

/// Default lower clamp for the auxiliary scale variables `z_ik`.
pub const DEFAULT_Z_FLOOR: f64 = 1e-10;

/// C data matrices sharing the same M feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewData {
    sources: Vec<DMatrix<f64>>,
}

impl MultiViewData {
    pub fn new(sources: Vec<DMatrix<f64>>) -> Result<Self> {
        if sources.is_empty() {
            return Err(BjmdError::Invariant("at least one source is required".into()));
        }
        let m = sources[0].nrows();
        if m == 0 {
            return Err(BjmdError::Invariant("sources must have at least one row".into()));
        }
        for (c, x) in sources.iter().enumerate() {
            if x.nrows() != m {
                return Err(BjmdError::DimensionMismatch {
                    source_index: c,
                    detail: format!("expected {m} rows, found {}", x.nrows()),
                });
            }
            if x.ncols() == 0 {
                return Err(BjmdError::DimensionMismatch {
                    source_index: c,
                    detail: "source has no columns".into(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(BjmdError::Invariant(format!("source {c} contains non-finite entries")));
            }
        }
        Ok(Self { sources })
    }

    pub fn n_features(&self) -> usize {
        self.sources[0].nrows()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.sources.iter().map(|x| x.ncols()).collect()
    }

    pub fn source(&self, c: usize) -> &DMatrix<f64> {
        &self.sources[c]
    }

    pub fn sources(&self) -> &[DMatrix<f64>] {
        &self.sources
    }

    pub fn into_sources(self) -> Vec<DMatrix<f64>> {
        self.sources
    }

    /// All sources merged column-wise into a single source.
    pub fn concatenated(&self) -> MultiViewData {
        let m = self.n_features();
        let total: usize = self.sample_counts().iter().sum();
        let mut merged = DMatrix::zeros(m, total);
        let mut offset = 0;
        for x in &self.sources {
            merged.columns_mut(offset, x.ncols()).copy_from(x);
            offset += x.ncols();
        }
        MultiViewData { sources: vec![merged] }
    }

    /// Keeps only the given feature rows in every source.
    pub fn select_rows(&self, rows: &[usize]) -> Result<MultiViewData> {
        if rows.is_empty() {
            return Err(BjmdError::Invariant("row selection is empty".into()));
        }
        let sources = self.sources.iter().map(|x| x.select_rows(rows.iter())).collect();
        MultiViewData::new(sources)
    }
}

/// Prior hyperparameters. `alpha0` carries one Dirichlet concentration per
/// factor, so its length fixes K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda: f64,
    pub alpha0: Vec<f64>,
    pub a0: f64,
    pub b0: f64,
}

impl Hyperparams {
    /// λ = 1, α₀ₖ = 1.1, a₀ = b₀ = 1.
    pub fn with_k(k: usize) -> Self {
        Self { lambda: 1.0, alpha0: vec![1.1; k], a0: 1.0, b0: 1.0 }
    }

    pub fn k(&self) -> usize {
        self.alpha0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha0.is_empty() {
            return Err(BjmdError::Invariant("K must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(BjmdError::Invariant(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if let Some(a) = self.alpha0.iter().find(|a| !(**a >= 1.0 && a.is_finite())) {
            return Err(BjmdError::Invariant(format!("alpha0 entries must be >= 1, got {a}")));
        }
        if !(self.a0 > 0.0 && self.a0.is_finite()) || !(self.b0 > 0.0 && self.b0.is_finite()) {
            return Err(BjmdError::Invariant("a0 and b0 must be > 0".into()));
        }
        Ok(())
    }
}

/// Point estimate of every latent quantity in the reformulated model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// Shared basis, M×K.
    pub w: DMatrix<f64>,
    /// Scale-mixture variances of the Laplace prior, M×K.
    pub z: DMatrix<f64>,
    /// Per-source coefficients, K×N_c, column-stochastic.
    pub h: Vec<DMatrix<f64>>,
    /// Per-source noise variances.
    pub sigma2: Vec<f64>,
}

impl ModelState {
    pub fn k(&self) -> usize {
        self.w.ncols()
    }
}

/// Regularizer used on the diagonal of the W-row normal equations.
///
/// The scale-mixture term `Σ w²/(2z)` is minimized exactly by `1/z`; the
/// closed form usually quoted for this update instead carries `1/√z`, which is
/// the default here. Only [`WRegularizer::InverseZ`] makes every block update
/// a coordinate minimizer of [`map_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WRegularizer {
    /// Ridge `diag(z)⁻¹`: the exact block minimizer, so MAP traces never rise.
    InverseZ,
    /// Ridge `diag(√z)⁻¹`, the default. It
    /// is not the block minimizer and can, rarely, raise the objective.
    InverseSqrtZ,
}

/// Knobs for both engines. Fields unused by one engine are ignored there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Outer relative tolerance (objective change for MAP, H change for VI).
    pub tol_outer: f64,
    pub max_outer_iters: usize,
    /// VI: iterations between coefficient-stability checks.
    pub check_interval: usize,
    /// VI: Monte Carlo draws per gradient estimate.
    pub mc_samples: usize,
    /// Fraction-to-boundary damping of the interior-point step.
    pub ip_eta: f64,
    pub ip_max_iters: usize,
    pub ip_tol: f64,
    pub rng_seed: u64,
    pub z_floor: f64,
    pub w_regularizer: WRegularizer,
    /// VI: base step size of the adaptive step rule.
    pub step_size: f64,
    /// VI: initial log standard deviation of every variational coordinate.
    pub init_log_std: f64,
    /// Run row/column/sample loops on the rayon pool when available.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::map()
    }
}

impl SolverConfig {
    pub fn map() -> Self {
        Self {
            tol_outer: 1e-3,
            max_outer_iters: 500,
            check_interval: 100,
            mc_samples: 1,
            ip_eta: 0.95,
            ip_max_iters: 50,
            ip_tol: 1e-8,
            rng_seed: 0,
            z_floor: DEFAULT_Z_FLOOR,
            w_regularizer: WRegularizer::InverseSqrtZ,
            step_size: 0.1,
            init_log_std: -1.0,
            parallel: true,
        }
    }

    /// VI defaults. The coefficient-change tolerance is `1e-5`: with the
    /// adaptive step rule a looser threshold stops within a few hundred
    /// iterations, long before the coefficients settle.
    pub fn advi() -> Self {
        Self { tol_outer: 1e-5, max_outer_iters: 150_000, ..Self::map() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ip_eta > 0.0 && self.ip_eta < 1.0) {
            return Err(BjmdError::Invariant(format!("ip_eta must lie in (0,1), got {}", self.ip_eta)));
        }
        for (name, v) in [
            ("tol_outer", self.tol_outer),
            ("ip_tol", self.ip_tol),
            ("z_floor", self.z_floor),
            ("step_size", self.step_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BjmdError::Invariant(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.max_outer_iters == 0
            || self.check_interval == 0
            || self.mc_samples == 0
            || self.ip_max_iters == 0
        {
            return Err(BjmdError::Invariant("iteration counts must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome summary of one engine run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// MAP: objective after every sweep (entry 0 is the initial state).
    /// VI: window-averaged ELBO estimate at every check.
    pub objective_trace: Vec<f64>,
    /// VI only: max-over-sources relative coefficient change at every check.
    pub h_change_trace: Vec<f64>,
    /// Wall-clock seconds since the start of the run at every trace entry.
    pub trace_seconds: Vec<f64>,
    pub iterations: usize,
    pub elapsed_seconds: f64,
    pub final_state: ModelState,
    pub converged: bool,
}

/// Checks every type invariant and the mutual consistency of shapes.
pub fn validate(data: &MultiViewData, hyper: &Hyperparams, state: &ModelState) -> Result<()> {
    hyper.validate()?;
    let m = data.n_features();
    let k = hyper.k();
    if state.w.nrows() != m || state.w.ncols() != k {
        return Err(BjmdError::Shape(format!(
            "W is {}x{}, expected {m}x{k}",
            state.w.nrows(),
            state.w.ncols()
        )));
    }
    if state.z.shape() != state.w.shape() {
        return Err(BjmdError::Shape(format!("Z is {:?}, expected {:?}", state.z.shape(), state.w.shape())));
    }
    if state.h.len() != data.n_sources() || state.sigma2.len() != data.n_sources() {
        return Err(BjmdError::Shape(format!(
            "state has {} coefficient matrices and {} variances for {} sources",
            state.h.len(),
            state.sigma2.len(),
            data.n_sources()
        )));
    }
    if state.w.iter().any(|v| !v.is_finite()) {
        return Err(BjmdError::Invariant("W contains non-finite entries".into()));
    }
    if state.z.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(BjmdError::Invariant("every z_ik must be finite and > 0".into()));
    }
    for (c, (hc, x)) in state.h.iter().zip(data.sources()).enumerate() {
        if hc.nrows() != k || hc.ncols() != x.ncols() {
            return Err(BjmdError::DimensionMismatch {
                source_index: c,
                detail: format!("H is {}x{}, expected {k}x{}", hc.nrows(), hc.ncols(), x.ncols()),
            });
        }
        if hc.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(BjmdError::Invariant(format!("H of source {c} must be finite and strictly positive")));
        }
        for (j, col) in hc.column_iter().enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(BjmdError::Invariant(format!(
                    "column {j} of H in source {c} sums to {s}, not 1"
                )));
            }
        }
    }
    if let Some((c, s)) = state.sigma2.iter().enumerate().find(|(_, s)| !(s.is_finite() && **s > 0.0)) {
        return Err(BjmdError::Invariant(format!("sigma2 of source {c} must be > 0, got {s}")));
    }
    Ok(())
}

/// Noiseless model mean `W·H`.
pub fn reconstruct(w: &DMatrix<f64>, hc: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.ncols() != hc.nrows() {
        return Err(BjmdError::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            w.nrows(),
            w.ncols(),
            hc.nrows(),
            hc.ncols()
        )));
    }
    Ok(w * hc)
}

/// Sum of squared residuals `‖X − WH‖²_F` for one source.
pub fn residual_sq(x: &DMatrix<f64>, w: &DMatrix<f64>, hc: &DMatrix<f64>) -> f64 {
    let mut r = x.clone();
    r.gemm(-1.0, w, hc, 1.0);
    r.norm_squared()
}

/// `ln IG(σ²; a, b) = a ln b − lnΓ(a) − (a+1) ln σ² − b/σ²`.
pub fn ln_inv_gamma(sigma2: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * sigma2.ln() - b / sigma2
}

/// Log density of Dirichlet(α) at a point of the open simplex.
pub fn ln_dirichlet(h: &[f64], alpha: &[f64]) -> f64 {
    let norm = ln_gamma(alpha.iter().sum()) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>();
    norm + h.iter().zip(alpha).map(|(hk, a)| dirichlet_kernel(*hk, *a)).sum::<f64>()
}

#[inline]
fn dirichlet_kernel(h: f64, alpha: f64) -> f64 {
    // (α−1)·ln h with the convention 0·ln h = 0 for α = 1
    if alpha == 1.0 {
        0.0
    } else {
        (alpha - 1.0) * h.ln()
    }
}

fn check_evaluable(data: &MultiViewData, hyper: &Hyperparams, state: &ModelState, check_z: bool) -> Result<()> {
    hyper.validate()?;
    let k = hyper.k();
    if state.w.nrows() != data.n_features() || state.w.ncols() != k {
        return Err(BjmdError::Shape("W does not match data/hyperparameters".into()));
    }
    if state.h.len() != data.n_sources() || state.sigma2.len() != data.n_sources() {
        return Err(BjmdError::Shape("state does not match number of sources".into()));
    }
    for (c, (hc, x)) in state.h.iter().zip(data.sources()).enumerate() {
        if hc.nrows() != k || hc.ncols() != x.ncols() {
            return Err(BjmdError::DimensionMismatch { source_index: c, detail: "H shape".into() });
        }
        if hc.iter().any(|v| !(*v > 0.0)) {
            return Err(BjmdError::Invariant(format!("H of source {c} has a non-positive entry")));
        }
    }
    if state.sigma2.iter().any(|s| !(*s > 0.0)) {
        return Err(BjmdError::Invariant("sigma2 must be > 0".into()));
    }
    if check_z && state.z.iter().any(|v| !(*v > 0.0)) {
        return Err(BjmdError::Invariant("z must be > 0".into()));
    }
    Ok(())
}

/// Reformulated negative log-posterior minimized by the MAP engine:
///
/// ```text
/// F = Σ_c [ ‖X_c − W H_c‖²/(2σ²_c) + (M N_c / 2) ln σ²_c ]
///   − Σ_c Σ_{k,j} (α₀ₖ − 1) ln h_kj
///   + Σ_{i,k} [ z_ik/λ + ½ ln z_ik + w²_ik/(2 z_ik) ]
///   − Σ_c ln IG(σ²_c; a₀, b₀)
/// ```
///
/// The `(M N_c / 2) ln σ²_c` Gaussian normalizer makes the closed-form σ²
/// update the exact block minimizer; it is constant in W, Z and H.
pub fn map_objective(state: &ModelState, data: &MultiViewData, hyper: &Hyperparams) -> Result<f64> {
    check_evaluable(data, hyper, state, true)?;
    let m = data.n_features() as f64;
    let mut f = 0.0;
    for (c, x) in data.sources().iter().enumerate() {
        let s2 = state.sigma2[c];
        f += residual_sq(x, &state.w, &state.h[c]) / (2.0 * s2);
        f += 0.5 * m * x.ncols() as f64 * s2.ln();
        f -= dirichlet_terms(&state.h[c], &hyper.alpha0);
        f -= ln_inv_gamma(s2, hyper.a0, hyper.b0);
    }
    f += scale_mixture_terms(&state.w, &state.z, hyper.lambda);
    if !f.is_finite() {
        return Err(BjmdError::NumericOverflow(format!("objective evaluated to {f}")));
    }
    Ok(f)
}

/// `Σ_{k,j} (α₀ₖ − 1) ln h_kj`.
pub fn dirichlet_terms(hc: &DMatrix<f64>, alpha0: &[f64]) -> f64 {
    hc.column_iter()
        .map(|col| col.iter().zip(alpha0).map(|(h, a)| dirichlet_kernel(*h, *a)).sum::<f64>())
        .sum()
}

/// `Σ_{i,k} z/λ + ½ ln z + w²/(2z)`.
pub fn scale_mixture_terms(w: &DMatrix<f64>, z: &DMatrix<f64>, lambda: f64) -> f64 {
    w.iter()
        .zip(z.iter())
        .map(|(w, z)| z / lambda + 0.5 * z.ln() + w * w / (2.0 * z))
        .sum()
}

/// Log joint density of the original (Laplace-prior) model, all normalizing
/// constants included. Z is ignored.
pub fn bjmd_log_joint(
    w: &DMatrix<f64>,
    h: &[DMatrix<f64>],
    sigma2: &[f64],
    data: &MultiViewData,
    hyper: &Hyperparams,
) -> Result<f64> {
    let probe = ModelState {
        w: w.clone(),
        z: DMatrix::from_element(w.nrows(), w.ncols(), 1.0),
        h: h.to_vec(),
        sigma2: sigma2.to_vec(),
    };
    check_evaluable(data, hyper, &probe, false)?;
    let lambda = hyper.lambda;
    let mut lp: f64 = w.iter().map(|v| -(2.0 * lambda).ln() - v.abs() / lambda).sum();
    let m = data.n_features() as f64;
    for (c, x) in data.sources().iter().enumerate() {
        let s2 = sigma2[c];
        let n = x.ncols() as f64;
        lp += h[c].column_iter().map(|col| ln_dirichlet(col.as_slice(), &hyper.alpha0)).sum::<f64>();
        lp += -0.5 * m * n * (2.0 * std::f64::consts::PI * s2).ln() - residual_sq(x, w, &h[c]) / (2.0 * s2);
        lp += ln_inv_gamma(s2, hyper.a0, hyper.b0);
    }
    if !lp.is_finite() {
        return Err(BjmdError::NumericOverflow(format!("log joint evaluated to {lp}")));
    }
    Ok(lp)
}

/// Per-source sample variance of all matrix entries.
pub fn entry_variance(x: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mean = x.sum() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

pub(crate) fn column_vec(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    m.column(j).into_owned()
}
