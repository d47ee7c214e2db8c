//! Bijections between the constrained parameters `(W, H, σ²)` and a flat
//! real coordinate vector.
//!
//! Layout: W column-major (M·K identity coordinates), then every source's H
//! column by column with K−1 stick-breaking coordinates per column, then one
//! `ln σ²_c` per source.
//!
//! Stick-breaking: `z_k = sigmoid(y_k)`, `h_k = r_k z_k`, `r_{k+1} = r_k (1−z_k)`
//! with `r_0 = 1` and `h_{K−1} = r_{K−1}`. The Jacobian of `y ↦ h_{0..K−2}` is
//! triangular with diagonal `r_k z_k (1−z_k)`.

use nalgebra::DMatrix;

use crate::error::{BjmdError, Result};
use crate::model::ModelState;
use crate::simplex_qp::H_FLOOR;

/// Shapes of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub m: usize,
    pub k: usize,
    pub n: Vec<usize>,
}

impl Layout {
    pub fn new(m: usize, k: usize, n: Vec<usize>) -> Result<Self> {
        if m == 0 || k == 0 || n.is_empty() || n.contains(&0) {
            return Err(BjmdError::Shape(format!("degenerate layout m={m} k={k} n={n:?}")));
        }
        Ok(Self { m, k, n })
    }

    pub fn for_state(state: &ModelState) -> Result<Self> {
        Self::new(state.w.nrows(), state.w.ncols(), state.h.iter().map(|h| h.ncols()).collect())
    }

    pub fn n_sources(&self) -> usize {
        self.n.len()
    }

    pub fn w_len(&self) -> usize {
        self.m * self.k
    }

    /// Offset of source `c`'s coefficient block.
    pub fn h_offset(&self, c: usize) -> usize {
        self.w_len() + self.n[..c].iter().sum::<usize>() * (self.k - 1)
    }

    pub fn h_len(&self, c: usize) -> usize {
        self.n[c] * (self.k - 1)
    }

    pub fn sigma_offset(&self) -> usize {
        self.h_offset(self.n_sources())
    }

    pub fn dim(&self) -> usize {
        self.sigma_offset() + self.n_sources()
    }
}

pub fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + eʸ)` without overflow.
pub fn softplus(y: f64) -> f64 {
    if y > 0.0 {
        y + (-y).exp().ln_1p()
    } else {
        y.exp().ln_1p()
    }
}

/// Forward quantities of one stick-breaking column, reused by the density
/// and its gradient.
#[derive(Debug, Clone, Default)]
pub struct Stick {
    /// Fractions `z_k`, length K−1.
    pub z: Vec<f64>,
    /// Remaining lengths `r_k`, length K.
    pub rem: Vec<f64>,
    /// Simplex point, length K.
    pub x: Vec<f64>,
    /// `ln x_k` computed in log space, length K.
    pub log_x: Vec<f64>,
    /// `ln |det ∂x_{0..K−2}/∂y|`.
    pub log_jac: f64,
}

impl Stick {
    pub fn with_k(k: usize) -> Self {
        Self {
            z: vec![0.0; k.saturating_sub(1)],
            rem: vec![0.0; k],
            x: vec![0.0; k],
            log_x: vec![0.0; k],
            log_jac: 0.0,
        }
    }

    /// Maps `y` (length K−1) onto the simplex, overwriting every buffer.
    pub fn forward(&mut self, y: &[f64]) {
        let k = y.len() + 1;
        if self.x.len() != k {
            *self = Self::with_k(k);
        }
        let mut rem = 1.0;
        let mut log_rem = 0.0;
        let mut log_jac = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let z = sigmoid(yi);
            let log_z = -softplus(-yi);
            let log_1mz = -softplus(yi);
            self.z[i] = z;
            self.rem[i] = rem;
            self.x[i] = rem * z;
            self.log_x[i] = log_rem + log_z;
            log_jac += log_rem + log_z + log_1mz;
            rem *= 1.0 - z;
            log_rem += log_1mz;
        }
        self.rem[k - 1] = rem;
        self.x[k - 1] = rem;
        self.log_x[k - 1] = log_rem;
        self.log_jac = log_jac;
    }

    /// Pulls `gx = ∂L/∂x` back to `∂L/∂y`, adding into `gy`.
    pub fn backprop(&self, gx: &[f64], gy: &mut [f64]) {
        let k = self.x.len();
        let mut g_rem = gx[k - 1];
        for i in (0..k - 1).rev() {
            let z = self.z[i];
            let r = self.rem[i];
            let g_z = (gx[i] - g_rem) * r;
            gy[i] += g_z * z * (1.0 - z);
            g_rem = gx[i] * z + g_rem * (1.0 - z);
        }
    }

    /// Adds `∂/∂y [Σ_k (α_k − 1) ln x_k + ln|J|]` into `gy`.
    pub fn add_log_prior_jac_grad(&self, alpha0: &[f64], gy: &mut [f64]) {
        let k = self.x.len();
        let mut tail = alpha0[k - 1] - 1.0;
        for i in (0..k - 1).rev() {
            let z = self.z[i];
            let a = alpha0[i] - 1.0;
            let later = (k - 2 - i) as f64;
            gy[i] += a * (1.0 - z) - z * tail + (1.0 - 2.0 * z) - z * later;
            tail += a;
        }
    }
}

/// Stick-breaking coordinates of a strictly positive simplex point.
pub fn stick_unconstrain(h: &[f64]) -> Result<Vec<f64>> {
    if h.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(BjmdError::Invariant("stick-breaking needs a strictly positive column".into()));
    }
    let k = h.len();
    let total: f64 = h.iter().sum();
    let mut y = Vec::with_capacity(k.saturating_sub(1));
    let mut rem = 1.0;
    for &hk in &h[..k - 1] {
        let hk = hk / total;
        let z = (hk / rem).min(1.0 - f64::EPSILON);
        y.push(logit(z));
        rem -= hk;
        if !(rem > 0.0) {
            rem = f64::MIN_POSITIVE;
        }
    }
    Ok(y)
}

/// Simplex point for stick-breaking coordinates `y`.
pub fn stick_constrain(y: &[f64]) -> Vec<f64> {
    let mut s = Stick::with_k(y.len() + 1);
    s.forward(y);
    s.x
}

/// Flattens a state into unconstrained coordinates; Z is not represented.
pub fn to_unconstrained(state: &ModelState) -> Result<Vec<f64>> {
    let layout = Layout::for_state(state)?;
    let mut xi = Vec::with_capacity(layout.dim());
    xi.extend_from_slice(state.w.as_slice());
    for hc in &state.h {
        if hc.nrows() != layout.k {
            return Err(BjmdError::Shape("coefficient rows differ from basis columns".into()));
        }
        for col in hc.column_iter() {
            let col: Vec<f64> = col.iter().copied().collect();
            xi.extend(stick_unconstrain(&col)?);
        }
    }
    for &s2 in &state.sigma2 {
        if !(s2 > 0.0) {
            return Err(BjmdError::Invariant(format!("sigma2 must be > 0, got {s2}")));
        }
        xi.push(s2.ln());
    }
    Ok(xi)
}

/// Constrained parameters `(W, H, σ²)` for coordinates `xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constrained {
    pub w: DMatrix<f64>,
    pub h: Vec<DMatrix<f64>>,
    pub sigma2: Vec<f64>,
}

pub fn to_constrained(layout: &Layout, xi: &[f64]) -> Result<Constrained> {
    if xi.len() != layout.dim() {
        return Err(BjmdError::Shape(format!("expected {} coordinates, got {}", layout.dim(), xi.len())));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(BjmdError::NumericOverflow("non-finite unconstrained coordinate".into()));
    }
    let w = DMatrix::from_column_slice(layout.m, layout.k, &xi[..layout.w_len()]);
    let h = (0..layout.n_sources()).map(|c| coefficient_block(layout, xi, c)).collect();
    let sigma2 = xi[layout.sigma_offset()..].iter().map(|t| t.exp()).collect();
    Ok(Constrained { w, h, sigma2 })
}

fn coefficient_block(layout: &Layout, xi: &[f64], c: usize) -> DMatrix<f64> {
    let k = layout.k;
    let block = &xi[layout.h_offset(c)..layout.h_offset(c) + layout.h_len(c)];
    let mut h = DMatrix::zeros(k, layout.n[c]);
    let mut s = Stick::with_k(k);
    for j in 0..layout.n[c] {
        s.forward(&block[j * (k - 1)..(j + 1) * (k - 1)]);
        for (i, v) in s.x.iter().enumerate() {
            h[(i, j)] = *v;
        }
    }
    h
}

/// Coefficient matrices for `xi`, clamped to `H_FLOOR` and renormalized so
/// every column is strictly inside the simplex.
pub fn interior_coefficients(layout: &Layout, xi: &[f64]) -> Vec<DMatrix<f64>> {
    (0..layout.n_sources())
        .map(|c| {
            let mut h = coefficient_block(layout, xi, c);
            for mut col in h.column_iter_mut() {
                col.apply(|v| *v = v.max(H_FLOOR));
                let s = col.sum();
                col /= s;
            }
            h
        })
        .collect()
}

/// `ln |det ∂(W, H, σ²)/∂xi|` summed over every block.
pub fn log_abs_det_jacobian(layout: &Layout, xi: &[f64]) -> f64 {
    let k = layout.k;
    let mut total: f64 = xi[layout.sigma_offset()..].iter().sum();
    if k == 1 {
        return total;
    }
    let mut s = Stick::with_k(k);
    for c in 0..layout.n_sources() {
        let block = &xi[layout.h_offset(c)..layout.h_offset(c) + layout.h_len(c)];
        for col in block.chunks(k - 1) {
            s.forward(col);
            total += s.log_jac;
        }
    }
    total
}
