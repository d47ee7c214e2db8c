//! Unconstrained log densities and the reparameterized ELBO gradient.
//!
//! For `q(ξ) = N(m, diag(e^{2ω}))` and `ξ = m + e^ω ⊙ ε` with `ε ~ N(0, I)`:
//!
//! ```text
//! ELBO   = E_ε[log p(ξ)] + Σ ω + (D/2)(1 + ln 2π)
//! ∇_m    = E_ε[∇ log p(ξ)]
//! ∇_ω    = E_ε[∇ log p(ξ) ⊙ ε ⊙ e^ω] + 1
//! ```

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use super::transform::{Layout, Stick};
use crate::error::{BjmdError, Result};
use crate::model::{Hyperparams, MultiViewData};
use crate::par;

/// Bound applied to every log standard deviation.
pub const LOG_STD_BOUND: f64 = 20.0;

/// A differentiable log density on `R^D`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Returns `log p(ξ)` (up to a constant) and overwrites `grad` with its
    /// gradient.
    fn log_density_grad(&self, xi: &[f64], grad: &mut [f64]) -> f64;
}

/// Independent normal target `N(mean_d, sd²)`, handy for checking the
/// estimator against closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalTarget {
    pub mean: Vec<f64>,
    pub sd: f64,
}

impl LogDensity for NormalTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_grad(&self, xi: &[f64], grad: &mut [f64]) -> f64 {
        let v = self.sd * self.sd;
        let mut lp = -0.5 * self.mean.len() as f64 * (2.0 * PI * v).ln();
        for ((g, x), mu) in grad.iter_mut().zip(xi).zip(&self.mean) {
            lp -= (x - mu) * (x - mu) / (2.0 * v);
            *g = -(x - mu) / v;
        }
        lp
    }
}

/// BJMD log joint pulled back to unconstrained coordinates, including every
/// normalizing constant and the log-Jacobian of the transform.
#[derive(Debug, Clone)]
pub struct BjmdPosterior<'a> {
    data: &'a MultiViewData,
    hyper: &'a Hyperparams,
    layout: Layout,
    ln_dirichlet_norm: f64,
    ln_inv_gamma_norm: f64,
}

impl<'a> BjmdPosterior<'a> {
    pub fn new(data: &'a MultiViewData, hyper: &'a Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(data.n_features(), hyper.k(), data.sample_counts())?;
        let a_sum: f64 = hyper.alpha0.iter().sum();
        let ln_dirichlet_norm = ln_gamma(a_sum) - hyper.alpha0.iter().map(|a| ln_gamma(*a)).sum::<f64>();
        let ln_inv_gamma_norm = hyper.a0 * hyper.b0.ln() - ln_gamma(hyper.a0);
        Ok(Self { data, hyper, layout, ln_dirichlet_norm, ln_inv_gamma_norm })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }
}

impl LogDensity for BjmdPosterior<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_grad(&self, xi: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let (m, k) = (l.m, l.k);
        let hyper = self.hyper;
        let lambda = hyper.lambda;
        grad.fill(0.0);

        let w = DMatrix::from_column_slice(m, k, &xi[..l.w_len()]);
        let mut lp = -(l.w_len() as f64) * (2.0 * lambda).ln();
        for (g, v) in grad[..l.w_len()].iter_mut().zip(w.iter()) {
            lp -= v.abs() / lambda;
            *g = if *v > 0.0 {
                -1.0 / lambda
            } else if *v < 0.0 {
                1.0 / lambda
            } else {
                0.0
            };
        }

        let mut gw = DMatrix::zeros(m, k);
        let mut stick = Stick::with_k(k);
        let (a0, b0) = (hyper.a0, hyper.b0);
        for (c, x) in self.data.sources().iter().enumerate() {
            let n = x.ncols();
            let off = l.h_offset(c);
            let mut h = DMatrix::from_element(k, n, 1.0);
            if k > 1 {
                for j in 0..n {
                    stick.forward(&xi[off + j * (k - 1)..off + (j + 1) * (k - 1)]);
                    h.column_mut(j).copy_from_slice(&stick.x);
                    lp += self.ln_dirichlet_norm + stick.log_jac;
                    lp += stick.log_x.iter().zip(&hyper.alpha0).map(|(lx, a)| (a - 1.0) * lx).sum::<f64>();
                }
            }

            let t = xi[l.sigma_offset() + c];
            let s2 = t.exp();
            let mut r = x.clone();
            r.gemm(-1.0, &w, &h, 1.0);
            let rss = r.norm_squared();
            let mn = (m * n) as f64;
            lp += -0.5 * mn * ((2.0 * PI).ln() + t) - rss / (2.0 * s2);
            lp += self.ln_inv_gamma_norm - (a0 + 1.0) * t - b0 / s2 + t;
            grad[l.sigma_offset() + c] = -0.5 * mn + rss / (2.0 * s2) - (a0 + 1.0) + b0 / s2 + 1.0;

            let inv = 1.0 / s2;
            gw.gemm(inv, &r, &h.transpose(), 1.0);
            if k > 1 {
                let gh = w.tr_mul(&r) * inv;
                for j in 0..n {
                    let y = &xi[off + j * (k - 1)..off + (j + 1) * (k - 1)];
                    stick.forward(y);
                    let gy = &mut grad[off + j * (k - 1)..off + (j + 1) * (k - 1)];
                    stick.backprop(gh.column(j).as_slice(), gy);
                    stick.add_log_prior_jac_grad(&hyper.alpha0, gy);
                }
            }
        }
        for (g, v) in grad[..l.w_len()].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        lp
    }
}

/// Mean-field Gaussian variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(BjmdError::Shape(format!("{} means but {} log-stds", mean.len(), log_std.len())));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(BjmdError::Invariant("variational parameters must be finite".into()));
        }
        let mut p = Self { mean, log_std };
        p.clamp();
        Ok(p)
    }

    /// Every coordinate gets the same log standard deviation.
    pub fn around(mean: Vec<f64>, log_std: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![log_std; n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn clamp(&mut self) {
        for w in &mut self.log_std {
            *w = w.clamp(-LOG_STD_BOUND, LOG_STD_BOUND);
        }
    }

    /// Differential entropy of the Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().sum::<f64>() + 0.5 * self.dim() as f64 * (1.0 + (2.0 * PI).ln())
    }
}

/// Monte Carlo ELBO and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub elbo: f64,
    pub used: usize,
    /// Draws discarded because the density or its gradient was not finite.
    pub dropped: usize,
}

/// Averages the reparameterized gradient over `samples` draws. Noise is drawn
/// sequentially from `rng` so the estimate does not depend on threading.
pub fn elbo_gradient_estimate<D, R>(
    target: &D,
    params: &VariationalParams,
    samples: usize,
    rng: &mut R,
    parallel: bool,
) -> Result<GradientEstimate>
where
    D: LogDensity + ?Sized,
    R: Rng + ?Sized,
{
    let d = params.dim();
    if samples == 0 {
        return Err(BjmdError::Invariant("need at least one Monte Carlo sample".into()));
    }
    if target.dim() != d {
        return Err(BjmdError::Shape(format!("target has {} coordinates, params {d}", target.dim())));
    }
    let sd: Vec<f64> = params.log_std.iter().map(|w| w.exp()).collect();
    let noise: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    let draws = par::map_slice(&noise, parallel && samples > 1, |eps| {
        let xi: Vec<f64> = (0..d).map(|i| params.mean[i] + sd[i] * eps[i]).collect();
        let mut g = vec![0.0; d];
        let lp = target.log_density_grad(&xi, &mut g);
        (lp.is_finite() && g.iter().all(|v| v.is_finite())).then_some((lp, g))
    });

    let mut gm = vec![0.0; d];
    let mut gw = vec![0.0; d];
    let mut lp_sum = 0.0;
    let mut used = 0;
    for (eps, draw) in noise.iter().zip(&draws) {
        let Some((lp, g)) = draw else { continue };
        used += 1;
        lp_sum += lp;
        for i in 0..d {
            gm[i] += g[i];
            gw[i] += g[i] * eps[i] * sd[i];
        }
    }
    let dropped = samples - used;
    if used == 0 {
        return Err(BjmdError::Estimator { samples });
    }
    let inv = 1.0 / used as f64;
    gm.iter_mut().for_each(|v| *v *= inv);
    gw.iter_mut().for_each(|v| *v = *v * inv + 1.0);
    Ok(GradientEstimate { mean: gm, log_std: gw, elbo: lp_sum * inv + params.entropy(), used, dropped })
}
