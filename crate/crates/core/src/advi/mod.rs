//! Mean-field Gaussian variational inference for the BJMD model.
//!
//! Constrained latents are mapped to `R^D` by [`transform`], the ELBO
//! gradient is estimated by reparameterized Monte Carlo in [`estimator`], and
//! [`fit_advi`] ascends it with a per-coordinate adaptive step. Every
//! `check_interval` iterations the coefficient matrices implied by the
//! variational means are compared with those of the previous check; the run
//! stops once `max_c ‖ΔH_c‖²_F / ‖H_c‖²_F` falls below `tol_outer`.

pub mod estimator;
pub mod transform;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use estimator::{
    elbo_gradient_estimate, BjmdPosterior, GradientEstimate, LogDensity, NormalTarget, VariationalParams,
};
pub use transform::{log_abs_det_jacobian, to_constrained, to_unconstrained, Constrained, Layout};

use crate::error::{BjmdError, Result};
use crate::map_solver::{init_random, update_z};
use crate::model::{self, FitReport, Hyperparams, ModelState, MultiViewData, SolverConfig};

/// Consecutive non-finite ELBO windows tolerated before giving up.
pub const MAX_NAN_CHECKS: usize = 10;

/// Decay of the running squared-gradient average.
const GRAD_AVG_WEIGHT: f64 = 0.1;

/// Per-coordinate adaptive step: a running average `s` of squared gradients
/// and step `η t^{-1/2} / (1 + √s)` at iteration `t`.
#[derive(Debug, Clone)]
pub struct AdaptiveStep {
    eta: f64,
    t: usize,
    s_mean: Vec<f64>,
    s_log_std: Vec<f64>,
}

impl AdaptiveStep {
    pub fn new(eta: f64, dim: usize) -> Self {
        Self { eta, t: 0, s_mean: vec![0.0; dim], s_log_std: vec![0.0; dim] }
    }

    /// Applies one ascent step along `g` to `params`.
    pub fn apply(&mut self, params: &mut VariationalParams, g: &GradientEstimate) {
        self.t += 1;
        let first = self.t == 1;
        let scale = self.eta * (self.t as f64).powf(-0.5 + 1e-16);
        let update = |x: &mut [f64], s: &mut [f64], g: &[f64]| {
            for ((xi, si), gi) in x.iter_mut().zip(s.iter_mut()).zip(g) {
                *si = if first { gi * gi } else { GRAD_AVG_WEIGHT * gi * gi + (1.0 - GRAD_AVG_WEIGHT) * *si };
                *xi += scale * gi / (1.0 + si.sqrt());
            }
        };
        update(&mut params.mean, &mut self.s_mean, &g.mean);
        update(&mut params.log_std, &mut self.s_log_std, &g.log_std);
        params.clamp();
    }
}

/// Outcome of [`fit_advi`].
#[derive(Debug, Clone, PartialEq)]
pub struct ViFit {
    pub params: VariationalParams,
    /// Variational means mapped to the constrained space, Z from [`update_z`].
    pub extracted: ModelState,
    /// `objective_trace` holds the mean ELBO estimate of every check window.
    pub report: FitReport,
    /// Mean ELBO estimate over the last check window.
    pub final_elbo: f64,
    pub dropped_samples: usize,
}

/// Point estimate encoded by the variational means.
pub fn extract_state(layout: &Layout, mean: &[f64], lambda: f64, z_floor: f64) -> Result<ModelState> {
    let cons = to_constrained(layout, mean)?;
    let h = transform::interior_coefficients(layout, mean);
    let z = update_z(&cons.w, lambda, z_floor);
    Ok(ModelState { w: cons.w, z, h, sigma2: cons.sigma2 })
}

/// `max_c ‖H_c − P_c‖²_F / ‖P_c‖²_F`.
pub fn relative_h_change(h: &[DMatrix<f64>], prev: &[DMatrix<f64>]) -> f64 {
    h.iter()
        .zip(prev)
        .map(|(a, b)| (a - b).norm_squared() / b.norm_squared().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Runs stochastic gradient ascent on the ELBO from a random start drawn with
/// `seed`. `seed` also drives the Monte Carlo noise; `config.rng_seed` is not
/// consulted.
pub fn fit_advi(data: &MultiViewData, hyper: &Hyperparams, config: &SolverConfig, seed: u64) -> Result<ViFit> {
    config.validate()?;
    let init = init_random(data, hyper, seed, config.z_floor)?;
    fit_advi_from(data, hyper, config, seed, &init)
}

/// As [`fit_advi`] with the variational means started at `init`.
pub fn fit_advi_from(
    data: &MultiViewData,
    hyper: &Hyperparams,
    config: &SolverConfig,
    seed: u64,
    init: &ModelState,
) -> Result<ViFit> {
    config.validate()?;
    model::validate(data, hyper, init)?;
    let started = Instant::now();
    let target = BjmdPosterior::new(data, hyper)?;
    let layout = target.layout().clone();
    let mut params = VariationalParams::around(to_unconstrained(init)?, config.init_log_std)?;
    let mut step = AdaptiveStep::new(config.step_size, params.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut elbo_trace = Vec::new();
    let mut seconds = Vec::new();
    let mut change_trace = Vec::new();
    let mut prev_h = transform::interior_coefficients(&layout, &params.mean);
    let mut window_sum = 0.0;
    let mut window_len = 0usize;
    let mut nan_checks = 0;
    let mut dropped = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_outer_iters {
        iterations += 1;
        match elbo_gradient_estimate(&target, &params, config.mc_samples, &mut rng, config.parallel) {
            Ok(g) => {
                dropped += g.dropped;
                window_sum += g.elbo;
                window_len += 1;
                step.apply(&mut params, &g);
            }
            Err(BjmdError::Estimator { samples }) => dropped += samples,
            Err(e) => return Err(e),
        }
        if iterations % config.check_interval != 0 && iterations != config.max_outer_iters {
            continue;
        }

        let elbo = if window_len > 0 { window_sum / window_len as f64 } else { f64::NAN };
        window_sum = 0.0;
        window_len = 0;
        elbo_trace.push(elbo);
        seconds.push(started.elapsed().as_secs_f64());
        if elbo.is_finite() {
            nan_checks = 0;
        } else {
            nan_checks += 1;
            if nan_checks >= MAX_NAN_CHECKS {
                return Err(BjmdError::Divergence(format!(
                    "ELBO estimate non-finite for {MAX_NAN_CHECKS} consecutive checks at iteration {iterations}"
                )));
            }
        }

        let h = transform::interior_coefficients(&layout, &params.mean);
        let change = relative_h_change(&h, &prev_h);
        change_trace.push(change);
        prev_h = h;
        if change < config.tol_outer {
            converged = true;
            break;
        }
    }

    let extracted = extract_state(&layout, &params.mean, hyper.lambda, config.z_floor)?;
    model::validate(data, hyper, &extracted)?;
    let final_elbo = elbo_trace.last().copied().unwrap_or(f64::NAN);
    let report = FitReport {
        objective_trace: elbo_trace,
        h_change_trace: change_trace,
        trace_seconds: seconds,
        iterations,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        final_state: extracted.clone(),
        converged,
    };
    Ok(ViFit { params, extracted, report, final_elbo, dropped_samples: dropped })
}
