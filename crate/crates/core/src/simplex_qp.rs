//! Primal-dual interior-point Newton solver for one coefficient column:
//!
//! ```text
//! minimize   ½ hᵀQh − bᵀh − Σₖ αₖ ln hₖ
//! subject to 1ᵀh = 1,  h > 0
//! ```
//!
//! with `Q = WᵀW`, `b = Wᵀx` and `αₖ = σ²(α₀ₖ − 1)`. This is the σ²-scaled
//! form of the column subproblem `‖Wh − x‖²/(2σ²) − Σ (α₀ₖ−1) ln hₖ`; both
//! share the same minimizer.
//!
//! The KKT conditions are solved as the square system
//! `F(h, μ, s) = [Qh − μ1 − b − s; 1ᵀh − 1; diag(h)s − α] = 0`
//! by damped Newton steps on its `(2K+1)×(2K+1)` Jacobian
//! `[[Q, −1, −I], [1ᵀ, 0, 0], [diag(s), 0, diag(h)]]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{BjmdError, Result};
use crate::model::SolverConfig;

/// Lower clamp applied to returned coefficients.
pub const H_FLOOR: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-10;
const JACOBIAN_RIDGE: f64 = 1e-10;
const MAX_BACKTRACKS: usize = 40;
/// Stationarity target on `‖F‖∞`, relative to the problem scale.
const KKT_TOL: f64 = 1e-10;

/// One column subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnProblem {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub alpha: DVector<f64>,
    /// σ²_c of the originating source.
    pub scale: f64,
}

impl ColumnProblem {
    pub fn new(q: DMatrix<f64>, b: DVector<f64>, alpha: DVector<f64>, scale: f64) -> Result<Self> {
        let k = b.len();
        if k == 0 {
            return Err(BjmdError::Invariant("column problem needs K >= 1".into()));
        }
        if q.shape() != (k, k) || alpha.len() != k {
            return Err(BjmdError::Shape(format!(
                "Q is {:?}, b has {k} entries, alpha has {}",
                q.shape(),
                alpha.len()
            )));
        }
        for i in 0..k {
            for j in 0..i {
                if (q[(i, j)] - q[(j, i)]).abs() > SYMMETRY_TOL * (1.0 + q[(i, j)].abs()) {
                    return Err(BjmdError::Invariant("Q must be symmetric".into()));
                }
            }
        }
        if alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(BjmdError::Invariant("barrier weights must be >= 0".into()));
        }
        if !(scale > 0.0) {
            return Err(BjmdError::Invariant("scale must be > 0".into()));
        }
        Ok(Self { q, b, alpha, scale })
    }

    /// Builds the subproblem for data column `x` under basis `w`.
    pub fn from_column(w: &DMatrix<f64>, x: &DVector<f64>, sigma2: f64, alpha0: &[f64]) -> Result<Self> {
        if w.nrows() != x.len() || w.ncols() != alpha0.len() {
            return Err(BjmdError::Shape("basis, data column and alpha0 disagree".into()));
        }
        let q = w.tr_mul(w);
        let b = w.tr_mul(x);
        Self::new(q, b, barrier_weights(sigma2, alpha0), sigma2)
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    /// `½ hᵀQh − bᵀh − Σ αₖ ln hₖ`; `+∞` outside the open orthant where a
    /// barrier is active.
    pub fn objective(&self, h: &DVector<f64>) -> f64 {
        let quad = 0.5 * h.dot(&(&self.q * h)) - self.b.dot(h);
        let mut barrier = 0.0;
        for (a, hk) in self.alpha.iter().zip(h.iter()) {
            if *a > 0.0 {
                if *hk <= 0.0 {
                    return f64::INFINITY;
                }
                barrier -= a * hk.ln();
            }
        }
        quad + barrier
    }
}

/// `αₖ = σ²(α₀ₖ − 1)`.
pub fn barrier_weights(sigma2: f64, alpha0: &[f64]) -> DVector<f64> {
    DVector::from_iterator(alpha0.len(), alpha0.iter().map(|a| sigma2 * (a - 1.0)))
}

/// Primal-dual iterate `(h, μ, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IpIterate {
    pub h: DVector<f64>,
    pub mu: f64,
    pub s: DVector<f64>,
}

/// Result of [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSolution {
    pub h: DVector<f64>,
    pub iterate: IpIterate,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Uniform strictly interior start: `h = 1/K`, `sₖ = max(αₖK, 1e-3)`, `μ = 0`.
pub fn init_interior(k: usize, alpha: &DVector<f64>) -> IpIterate {
    let h = DVector::from_element(k, 1.0 / k as f64);
    let s = DVector::from_iterator(k, alpha.iter().map(|a| (a * k as f64).max(1e-3)));
    IpIterate { h, mu: 0.0, s }
}

fn warm_iterate(alpha: &DVector<f64>, init: &[f64]) -> IpIterate {
    let k = init.len();
    let mut h = DVector::from_iterator(k, init.iter().map(|v| v.max(1e-8)));
    h /= h.sum();
    let s = DVector::from_iterator(k, alpha.iter().zip(h.iter()).map(|(a, hk)| (a / hk).max(1e-3)));
    IpIterate { h, mu: 0.0, s }
}

/// Stacked KKT residual `[Qh − μ1 − b − s; 1ᵀh − 1; diag(h)s − α]`.
pub fn kkt_residual(p: &ColumnProblem, it: &IpIterate) -> DVector<f64> {
    let k = p.k();
    let mut f = DVector::zeros(2 * k + 1);
    let grad = &p.q * &it.h;
    for i in 0..k {
        f[i] = grad[i] - it.mu - p.b[i] - it.s[i];
        f[k + 1 + i] = it.h[i] * it.s[i] - p.alpha[i];
    }
    f[k] = it.h.sum() - 1.0;
    f
}

/// Jacobian of the KKT map at `it`.
pub fn kkt_jacobian(p: &ColumnProblem, it: &IpIterate) -> DMatrix<f64> {
    let k = p.k();
    let n = 2 * k + 1;
    let mut j = DMatrix::zeros(n, n);
    j.view_mut((0, 0), (k, k)).copy_from(&p.q);
    for i in 0..k {
        j[(i, k)] = -1.0;
        j[(i, k + 1 + i)] = -1.0;
        j[(k, i)] = 1.0;
        j[(k + 1 + i, i)] = it.s[i];
        j[(k + 1 + i, k + 1 + i)] = it.h[i];
    }
    j
}

/// Newton direction `d` solving `J d = −F`. A singular Jacobian is retried
/// once with `1e-10·I` added to the Q block.
pub fn newton_direction(p: &ColumnProblem, it: &IpIterate) -> Result<DVector<f64>> {
    let rhs = -kkt_residual(p, it);
    let mut jac = kkt_jacobian(p, it);
    if let Some(d) = jac.clone().lu().solve(&rhs).filter(|d| d.iter().all(|v| v.is_finite())) {
        return Ok(d);
    }
    for i in 0..p.k() {
        jac[(i, i)] += JACOBIAN_RIDGE;
    }
    jac.lu()
        .solve(&rhs)
        .filter(|d| d.iter().all(|v| v.is_finite()))
        .ok_or(BjmdError::SingularJacobian)
}

/// Largest step keeping `h + ρΔh > 0` and `s + ρΔs > 0`; infinite when no
/// component moves toward its boundary.
fn max_step(it: &IpIterate, d: &DVector<f64>) -> f64 {
    let k = it.h.len();
    let mut rho = f64::INFINITY;
    for i in 0..k {
        let dh = d[i];
        if dh < 0.0 {
            rho = rho.min(-it.h[i] / dh);
        }
        let ds = d[k + 1 + i];
        if ds < 0.0 {
            rho = rho.min(-it.s[i] / ds);
        }
    }
    rho
}

fn kkt_scale(p: &ColumnProblem) -> f64 {
    1.0 + p.q.amax() + p.b.amax() + p.alpha.amax()
}

/// Runs damped Newton iterations from `init` (or the uniform start).
///
/// Each step uses the fraction-to-boundary length `min(1, ηρ_max)` and is
/// halved while it would raise the objective, so accepted iterates decrease
/// the objective monotonically. Iteration stops once the objective change is
/// at most `ip_tol·(1+|obj|)` and the KKT residual has reached working
/// precision, or after `ip_max_iters` steps.
pub fn solve(p: &ColumnProblem, init: Option<&[f64]>, cfg: &SolverConfig) -> ColumnSolution {
    let k = p.k();
    if k == 1 {
        let h = DVector::from_element(1, 1.0);
        let mu = (&p.q * &h)[0] - p.b[0] - p.alpha[0];
        let iterate = IpIterate { h: h.clone(), mu, s: p.alpha.clone() };
        return ColumnSolution { objective: p.objective(&h), h, iterate, iterations: 0, converged: true };
    }
    let mut it = match init {
        Some(h0) if h0.len() == k => warm_iterate(&p.alpha, h0),
        _ => init_interior(k, &p.alpha),
    };
    let mut obj = p.objective(&it.h);
    let kkt_tol = KKT_TOL * kkt_scale(p);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.ip_max_iters {
        let d = match newton_direction(p, &it) {
            Ok(d) => d,
            Err(_) => break,
        };
        let mut rho = (cfg.ip_eta * max_step(&it, &d)).min(1.0);
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let h_new = &it.h + rho * d.rows(0, k);
            let f_new = p.objective(&h_new);
            if f_new <= obj + 1e-12 * (1.0 + obj.abs()) {
                accepted = Some((h_new, f_new));
                break;
            }
            rho *= 0.5;
        }
        iterations += 1;
        let Some((h_new, f_new)) = accepted else {
            break;
        };
        it.h = h_new;
        it.mu += rho * d[k];
        it.s += rho * d.rows(k + 1, k);
        let change = (obj - f_new).abs();
        obj = f_new;
        let res = kkt_residual(p, &it).amax();
        if change <= cfg.ip_tol * (1.0 + obj.abs()) && res <= kkt_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        converged = kkt_residual(p, &it).amax() <= kkt_tol.max(cfg.ip_tol);
    }

    let mut h = it.h.map(|v| v.max(H_FLOOR));
    h /= h.sum();
    h.apply(|v| *v = v.max(H_FLOOR));
    let objective = p.objective(&h);
    ColumnSolution { h, iterate: it, objective, iterations, converged }
}

/// Convenience wrapper: build the subproblem for `x` under `w` and solve it.
pub fn solve_column(
    w: &DMatrix<f64>,
    x: &DVector<f64>,
    sigma2: f64,
    alpha0: &[f64],
    init: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<ColumnSolution> {
    let p = ColumnProblem::from_column(w, x, sigma2, alpha0)?;
    Ok(solve(&p, init, cfg))
}
