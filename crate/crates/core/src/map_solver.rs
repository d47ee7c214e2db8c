//! Block-coordinate MAP engine.
//!
//! One sweep updates every row of W, then every coefficient column of every
//! source, then Z, then every σ²_c. Row and column solves within a block are
//! independent and run through [`crate::par`]. The loop stops when the relative
//! change of [`map_objective`] between sweeps drops to `tol_outer`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{BjmdError, Result};
use crate::model::{
    self, entry_variance, map_objective, residual_sq, FitReport, Hyperparams, ModelState, MultiViewData,
    SolverConfig, WRegularizer,
};
use crate::par;
use crate::simplex_qp::{self, ColumnProblem};

/// Lower clamp on every noise variance.
pub const SIGMA2_FLOOR: f64 = 1e-12;
/// Floor for the initial per-source variance of a constant matrix.
pub const SIGMA2_INIT_FLOOR: f64 = 1e-6;

/// Final state and run summary of [`fit_map`].
#[derive(Debug, Clone, PartialEq)]
pub struct MapFit {
    pub state: ModelState,
    pub report: FitReport,
}

/// Closed-form stationary point of `z/λ + ½ ln z + w²/(2z)` for every entry,
/// clamped below at `z_floor`.
pub fn update_z(w: &DMatrix<f64>, lambda: f64, z_floor: f64) -> DMatrix<f64> {
    w.map(|v| {
        let z = ((lambda * lambda + 8.0 * v * v * lambda).sqrt() - lambda) / 4.0;
        z.max(z_floor)
    })
}

/// Sufficient statistics shared by every W-row solve of one sweep.
struct RowSystem {
    /// Σ_c H_c H_cᵀ / σ²_c (K×K).
    gram: DMatrix<f64>,
    /// Σ_c X_c H_cᵀ / σ²_c (M×K); row i is the right-hand side of row i.
    rhs: DMatrix<f64>,
}

impl RowSystem {
    fn new(data: &MultiViewData, state: &ModelState) -> Self {
        let k = state.k();
        let m = data.n_features();
        let mut gram = DMatrix::zeros(k, k);
        let mut rhs = DMatrix::zeros(m, k);
        for (c, x) in data.sources().iter().enumerate() {
            let inv = 1.0 / state.sigma2[c];
            let hc = &state.h[c];
            let ht = hc.transpose();
            gram.gemm(inv, hc, &ht, 1.0);
            rhs.gemm(inv, x, &ht, 1.0);
        }
        Self { gram, rhs }
    }

    fn solve_row(&self, i: usize, z_row: &[f64], reg: WRegularizer) -> Result<DVector<f64>> {
        let mut a = self.gram.clone();
        for (k, z) in z_row.iter().enumerate() {
            a[(k, k)] += match reg {
                WRegularizer::InverseZ => 1.0 / z,
                WRegularizer::InverseSqrtZ => 1.0 / z.sqrt(),
            };
        }
        let b = self.rhs.row(i).transpose();
        if let Some(chol) = a.clone().cholesky() {
            let w = chol.solve(&b);
            if w.iter().all(|v| v.is_finite()) {
                return Ok(w);
            }
        }
        log::warn!("row {i}: normal equations not positive definite, using pseudo-inverse");
        let pinv = a
            .pseudo_inverse(1e-14)
            .map_err(|e| BjmdError::SolverFailure { row: i, detail: e.to_string() })?;
        let w = pinv * b;
        if w.iter().all(|v| v.is_finite()) {
            Ok(w)
        } else {
            Err(BjmdError::SolverFailure { row: i, detail: "non-finite solution".into() })
        }
    }
}

fn z_row(z: &DMatrix<f64>, i: usize) -> Vec<f64> {
    z.row(i).iter().copied().collect()
}

/// Solves the K×K normal equations of row `i` of W against the current
/// coefficients, variances and scales. Inputs are not modified.
pub fn update_w_row(
    i: usize,
    data: &MultiViewData,
    state: &ModelState,
    reg: WRegularizer,
) -> Result<DVector<f64>> {
    RowSystem::new(data, state).solve_row(i, &z_row(&state.z, i), reg)
}

/// Every row of W from the same pre-sweep state.
pub fn update_w(data: &MultiViewData, state: &ModelState, reg: WRegularizer, parallel: bool) -> Result<DMatrix<f64>> {
    let sys = RowSystem::new(data, state);
    let m = data.n_features();
    let rows = par::map_range(m, parallel, |i| sys.solve_row(i, &z_row(&state.z, i), reg));
    let mut w = DMatrix::zeros(m, state.k());
    for (i, row) in rows.into_iter().enumerate() {
        w.set_row(i, &row?.transpose());
    }
    Ok(w)
}

/// `σ²_c = (2b₀ + ‖X_c − WH_c‖²) / (2a₀ + M N_c + 2)`, floored at [`SIGMA2_FLOOR`].
pub fn update_sigma2(c: usize, data: &MultiViewData, state: &ModelState, hyper: &Hyperparams) -> f64 {
    let x = data.source(c);
    let rss = residual_sq(x, &state.w, &state.h[c]);
    let denom = 2.0 * hyper.a0 + (x.nrows() * x.ncols()) as f64 + 2.0;
    ((2.0 * hyper.b0 + rss) / denom).max(SIGMA2_FLOOR)
}

/// Re-solves every coefficient column of source `c` under the current W and
/// σ²_c. A column whose solve would raise its subproblem objective keeps its
/// previous value.
pub fn update_h_source(
    c: usize,
    data: &MultiViewData,
    state: &ModelState,
    hyper: &Hyperparams,
    config: &SolverConfig,
) -> DMatrix<f64> {
    let x = data.source(c);
    let w = &state.w;
    let q = w.tr_mul(w);
    let b_all = w.tr_mul(x);
    let s2 = state.sigma2[c];
    let alpha = simplex_qp::barrier_weights(s2, &hyper.alpha0);
    let prev = &state.h[c];
    let cols = par::map_range(x.ncols(), config.parallel, |j| {
        let p = ColumnProblem { q: q.clone(), b: b_all.column(j).into_owned(), alpha: alpha.clone(), scale: s2 };
        let old = model::column_vec(prev, j);
        let sol = simplex_qp::solve(&p, None, config);
        if sol.objective <= p.objective(&old) {
            sol.h
        } else {
            old
        }
    });
    DMatrix::from_columns(&cols)
}

/// Random starting point: W iid N(0,1), H columns iid Dirichlet(α₀), Z from
/// [`update_z`], σ²_c the entry variance of X_c. Deterministic in `seed`.
pub fn init_random(data: &MultiViewData, hyper: &Hyperparams, seed: u64, z_floor: f64) -> Result<ModelState> {
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = data.n_features();
    let k = hyper.k();
    let w = DMatrix::from_fn(m, k, |_, _| StandardNormal.sample(&mut rng));
    let h = data
        .sample_counts()
        .iter()
        .map(|&n| random_simplex_columns(&mut rng, &hyper.alpha0, n))
        .collect::<Result<Vec<_>>>()?;
    let sigma2 = data.sources().iter().map(|x| entry_variance(x).max(SIGMA2_INIT_FLOOR)).collect();
    let z = update_z(&w, hyper.lambda, z_floor);
    Ok(ModelState { w, z, h, sigma2 })
}

fn random_simplex_columns(rng: &mut ChaCha8Rng, alpha0: &[f64], n: usize) -> Result<DMatrix<f64>> {
    let k = alpha0.len();
    if k == 1 {
        return Ok(DMatrix::from_element(1, n, 1.0));
    }
    // Dirichlet draws as normalized Gamma(α₀ₖ, 1) variates.
    let gammas = alpha0
        .iter()
        .map(|a| Gamma::new(*a, 1.0).map_err(|e| BjmdError::Invariant(format!("dirichlet prior: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut h = DMatrix::zeros(k, n);
    for j in 0..n {
        let mut col = DVector::from_iterator(k, gammas.iter().map(|g| g.sample(rng).max(1e-12)));
        col /= col.sum();
        h.set_column(j, &col);
    }
    Ok(h)
}

/// Runs sweeps until `|fᵗ − fᵗ⁻¹| / |fᵗ⁻¹| ≤ tol_outer` or `max_outer_iters`.
pub fn fit_map(
    data: &MultiViewData,
    hyper: &Hyperparams,
    config: &SolverConfig,
    init: Option<ModelState>,
) -> Result<MapFit> {
    config.validate()?;
    let started = Instant::now();
    let mut state = match init {
        Some(s) => s,
        None => init_random(data, hyper, config.rng_seed, config.z_floor)?,
    };
    model::validate(data, hyper, &state)?;

    let mut f_prev = map_objective(&state, data, hyper)?;
    let mut trace = vec![f_prev];
    let mut seconds = vec![started.elapsed().as_secs_f64()];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_outer_iters {
        sweep(data, hyper, config, &mut state)?;
        iterations += 1;
        let f = map_objective(&state, data, hyper).map_err(|e| match e {
            BjmdError::NumericOverflow(msg) => {
                BjmdError::NumericOverflow(format!("sweep {iterations}: {msg}"))
            }
            other => other,
        })?;
        trace.push(f);
        seconds.push(started.elapsed().as_secs_f64());
        let rel = (f - f_prev).abs() / f_prev.abs().max(f64::MIN_POSITIVE);
        f_prev = f;
        if rel <= config.tol_outer {
            converged = true;
            break;
        }
    }

    let report = FitReport {
        objective_trace: trace,
        h_change_trace: Vec::new(),
        trace_seconds: seconds,
        iterations,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        final_state: state.clone(),
        converged,
    };
    Ok(MapFit { state, report })
}

/// One full block-coordinate sweep in the order W, H, Z, σ².
pub fn sweep(data: &MultiViewData, hyper: &Hyperparams, config: &SolverConfig, state: &mut ModelState) -> Result<()> {
    state.w = update_w(data, state, config.w_regularizer, config.parallel)?;
    for c in 0..data.n_sources() {
        state.h[c] = update_h_source(c, data, state, hyper, config);
    }
    state.z = update_z(&state.w, hyper.lambda, config.z_floor);
    for c in 0..data.n_sources() {
        state.sigma2[c] = update_sigma2(c, data, state, hyper);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dz(w: f64, z: f64, lambda: f64) -> f64 {
        1.0 / lambda + 1.0 / (2.0 * z) - w * w / (2.0 * z * z)
    }

    #[test]
    fn z_update_closed_form() {
        let z = update_z(&DMatrix::from_element(1, 1, 0.0), 1.0, 1e-10);
        assert_eq!(z[(0, 0)], 1e-10);
        let z = update_z(&DMatrix::from_element(1, 1, 1.0), 1.0, 1e-10)[(0, 0)];
        assert!((z - 0.5).abs() < 1e-15);
        assert!(dz(1.0, z, 1.0).abs() < 1e-12);
        let z = update_z(&DMatrix::from_element(1, 1, 2.0), 2.0, 1e-10)[(0, 0)];
        assert!((z - (68f64.sqrt() - 2.0) / 4.0).abs() < 1e-12);
        assert!((z - 1.5616).abs() < 1e-4);
        assert!(dz(2.0, z, 2.0).abs() < 1e-10);
    }

    fn one_row(z: f64) -> (MultiViewData, ModelState) {
        let data = MultiViewData::new(vec![DMatrix::from_element(1, 2, 1.0)]).unwrap();
        let state = ModelState {
            w: DMatrix::from_element(1, 1, 0.3),
            z: DMatrix::from_element(1, 1, z),
            h: vec![DMatrix::from_element(1, 2, 1.0)],
            sigma2: vec![1.0],
        };
        (data, state)
    }

    #[test]
    fn w_row_least_squares_and_ridge_limits() {
        let (data, state) = one_row(1e12);
        let w = update_w_row(0, &data, &state, WRegularizer::InverseZ).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-9);
        let w = update_w_row(0, &data, &state, WRegularizer::InverseSqrtZ).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-5);
        let (data, state) = one_row(1e-10);
        let w = update_w_row(0, &data, &state, WRegularizer::InverseZ).unwrap();
        assert!(w[0].abs() < 1e-9);
        let w = update_w_row(0, &data, &state, WRegularizer::InverseSqrtZ).unwrap();
        assert!(w[0].abs() < 1e-4);
    }

    fn random_instance(seed: u64) -> (MultiViewData, Hyperparams, ModelState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = MultiViewData::new(vec![
            DMatrix::from_fn(6, 4, |_, _| rng.random_range(-2.0..2.0)),
            DMatrix::from_fn(6, 5, |_, _| rng.random_range(-2.0..2.0)),
        ])
        .unwrap();
        let hyper = Hyperparams::with_k(3);
        let mut state = init_random(&data, &hyper, seed, 1e-10).unwrap();
        state.sigma2 = vec![0.7, 1.9];
        (data, hyper, state)
    }

    /// Row-i objective of the W block with the exact 1/z regularizer.
    fn w_row_objective(i: usize, w: &[f64], data: &MultiViewData, state: &ModelState) -> f64 {
        let mut f = 0.0;
        for (c, x) in data.sources().iter().enumerate() {
            for j in 0..x.ncols() {
                let pred: f64 = (0..w.len()).map(|k| w[k] * state.h[c][(k, j)]).sum();
                f += (x[(i, j)] - pred).powi(2) / (2.0 * state.sigma2[c]);
            }
        }
        f + w.iter().enumerate().map(|(k, v)| v * v / (2.0 * state.z[(i, k)])).sum::<f64>()
    }

    #[test]
    fn w_row_zeroes_the_gradient() {
        let (data, _, state) = random_instance(17);
        for i in 0..6 {
            let w = update_w_row(i, &data, &state, WRegularizer::InverseZ).unwrap();
            let w = w.as_slice().to_vec();
            let f0 = w_row_objective(i, &w, &data, &state);
            for k in 0..3 {
                let eps = 1e-5;
                let mut wp = w.clone();
                wp[k] += eps;
                let mut wm = w.clone();
                wm[k] -= eps;
                let g = (w_row_objective(i, &wp, &data, &state) - w_row_objective(i, &wm, &data, &state))
                    / (2.0 * eps);
                assert!(g.abs() < 1e-6 * (1.0 + f0.abs()), "row {i} coord {k}: grad {g}");
                // a minimizer: perturbations never improve
                assert!(w_row_objective(i, &wp, &data, &state) >= f0);
                assert!(w_row_objective(i, &wm, &data, &state) >= f0);
            }
        }
    }

    #[test]
    fn w_rows_are_order_independent() {
        let (data, _, state) = random_instance(23);
        let all = update_w(&data, &state, WRegularizer::InverseZ, true).unwrap();
        for i in (0..6).rev() {
            let row = update_w_row(i, &data, &state, WRegularizer::InverseZ).unwrap();
            for k in 0..3 {
                assert!((row[k] - all[(i, k)]).abs() < 1e-12);
            }
        }
        let seq = update_w(&data, &state, WRegularizer::InverseZ, false).unwrap();
        assert!((seq - all).amax() < 1e-12);
    }

    #[test]
    fn sigma2_plug_in_values() {
        let w = DMatrix::from_element(2, 1, 1.0);
        let h = DMatrix::from_element(1, 3, 1.0);
        let perfect = MultiViewData::new(vec![&w * &h]).unwrap();
        let state = ModelState { w: w.clone(), z: w.clone(), h: vec![h.clone()], sigma2: vec![1.0] };
        let hyper = Hyperparams { lambda: 1.0, alpha0: vec![1.0], a0: 1.0, b0: 1.0 };
        assert!((update_sigma2(0, &perfect, &state, &hyper) - 0.2).abs() < 1e-15);

        // residual sum of squares 10 over six entries
        let mut x = &w * &h;
        x[(0, 0)] += 2.0;
        x[(1, 2)] += 6f64.sqrt();
        let noisy = MultiViewData::new(vec![x]).unwrap();
        assert!((update_sigma2(0, &noisy, &state, &hyper) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn sigma2_noninformative_limit() {
        let w = DMatrix::from_element(1, 1, 1.0);
        let h = DMatrix::from_element(1, 2, 1.0);
        let x = DMatrix::from_row_slice(1, 2, &[1.0 + 2f64.sqrt(), 1.0 - 2f64.sqrt()]);
        let data = MultiViewData::new(vec![x]).unwrap();
        let state = ModelState { w: w.clone(), z: w.clone(), h: vec![h], sigma2: vec![1.0] };
        let hyper = Hyperparams { lambda: 1.0, alpha0: vec![1.0], a0: 1e-12, b0: 1e-12 };
        assert!((update_sigma2(0, &data, &state, &hyper) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn init_is_deterministic_and_valid() {
        let (data, hyper, _) = random_instance(1);
        let a = init_random(&data, &hyper, 99, 1e-10).unwrap();
        let b = init_random(&data, &hyper, 99, 1e-10).unwrap();
        assert_eq!(a, b);
        model::validate(&data, &hyper, &a).unwrap();
        let c = init_random(&data, &hyper, 100, 1e-10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_of_constant_matrix_is_floored() {
        let data = MultiViewData::new(vec![DMatrix::from_element(3, 4, 2.0)]).unwrap();
        let s = init_random(&data, &Hyperparams::with_k(2), 0, 1e-10).unwrap();
        assert_eq!(s.sigma2[0], SIGMA2_INIT_FLOOR);
    }

    #[test]
    fn every_block_update_is_non_increasing() {
        for seed in 0..5 {
            let (data, hyper, mut state) = random_instance(seed);
            let cfg = SolverConfig::map();
            let obj = |s: &ModelState| map_objective(s, &data, &hyper).unwrap();
            for _ in 0..3 {
                for i in 0..data.n_features() {
                    let before = obj(&state);
                    let row = update_w_row(i, &data, &state, WRegularizer::InverseZ).unwrap();
                    state.w.set_row(i, &row.transpose());
                    assert!(obj(&state) <= before + 1e-9, "W row {i}");
                }
                for c in 0..data.n_sources() {
                    let before = obj(&state);
                    state.h[c] = update_h_source(c, &data, &state, &hyper, &cfg);
                    assert!(obj(&state) <= before + 1e-9, "H source {c}");
                }
                let before = obj(&state);
                state.z = update_z(&state.w, hyper.lambda, cfg.z_floor);
                assert!(obj(&state) <= before + 1e-9, "Z");
                for c in 0..data.n_sources() {
                    let before = obj(&state);
                    state.sigma2[c] = update_sigma2(c, &data, &state, &hyper);
                    assert!(obj(&state) <= before + 1e-9, "sigma2 {c}");
                }
            }
        }
    }

    #[test]
    fn rank_one_truth_is_a_fixed_point_neighbourhood() {
        let m = 8;
        let w_true = DMatrix::from_fn(m, 1, |i, _| 1.0 + i as f64 * 0.25);
        let h = DMatrix::from_element(1, 6, 1.0);
        let data = MultiViewData::new(vec![&w_true * &h]).unwrap();
        let hyper = Hyperparams { lambda: 1.0, alpha0: vec![1.1], a0: 1.0, b0: 1e-4 };
        let cfg = SolverConfig::map();
        let init = ModelState {
            z: update_z(&w_true, 1.0, cfg.z_floor),
            w: w_true,
            h: vec![h],
            sigma2: vec![1e-4],
        };
        let fit = fit_map(&data, &hyper, &cfg, Some(init)).unwrap();
        assert!(fit.report.converged);
        assert!(fit.report.iterations <= 3, "{}", fit.report.iterations);
        for pair in fit.report.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9);
        }
    }

    #[test]
    fn fit_rejects_invalid_init() {
        let (data, hyper, mut state) = random_instance(4);
        state.h[0][(0, 0)] = -1.0;
        assert!(fit_map(&data, &hyper, &SolverConfig::map(), Some(state)).is_err());
    }
}
