//! Synthetic multi-source benchmark with planted, overlapping basis blocks.
//!
//! Column k < K of the basis holds the constant `a` on a contiguous block of
//! `L` rows; consecutive blocks overlap in `coh` rows and column K is empty.
//! Coefficients are Bernoulli(p) memberships over the first K−1 clusters,
//! with empty columns assigned to cluster K, normalized to the simplex.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BjmdError, Result};
use crate::evaluation::LabelMatrix;
use crate::model::MultiViewData;

/// Parameters of the generator. The number of sources is `sigmas.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Magnitude of the nonzero basis entries.
    pub a: f64,
    pub k: usize,
    /// Nonzeros per basis column.
    pub l: usize,
    /// Overlap between consecutive basis columns.
    pub coh: usize,
    /// Samples per source.
    pub n_samples: usize,
    /// Bernoulli membership rate.
    pub p: f64,
    /// Noise standard deviation per source.
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    /// a=2, K=5, L=30, coh=5, N=120, p=0.3, σ=(1.0, 2.5, σ₃).
    pub fn small_scale(sigma3: f64) -> Self {
        Self { a: 2.0, k: 5, l: 30, coh: 5, n_samples: 120, p: 0.3, sigmas: vec![1.0, 2.5, sigma3], seed: 0 }
    }

    /// a=1.5, K=10, L=120, coh=10, N=1000, p=0.1, σ=(1.0, 2.5, σ₃).
    pub fn large_scale(sigma3: f64) -> Self {
        Self { a: 1.5, k: 10, l: 120, coh: 10, n_samples: 1000, p: 0.1, sigmas: vec![1.0, 2.5, sigma3], seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_sources(&self) -> usize {
        self.sigmas.len()
    }

    /// `M = L + (K−2)(L − coh)`.
    pub fn n_features(&self) -> usize {
        self.l + (self.k - 2) * (self.l - self.coh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(BjmdError::InvalidSpec(format!("K must be >= 2, got {}", self.k)));
        }
        if self.coh == 0 || self.coh >= self.l {
            return Err(BjmdError::InvalidSpec(format!(
                "coh must satisfy 0 < coh < L, got coh={} L={}",
                self.coh, self.l
            )));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(BjmdError::InvalidSpec(format!("p must lie in (0,1], got {}", self.p)));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(BjmdError::InvalidSpec("sigmas must be non-empty and >= 0".into()));
        }
        if self.n_samples == 0 {
            return Err(BjmdError::InvalidSpec("n_samples must be >= 1".into()));
        }
        if !self.a.is_finite() {
            return Err(BjmdError::InvalidSpec("a must be finite".into()));
        }
        Ok(())
    }
}

/// Generated data together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub data: MultiViewData,
    pub w_true: DMatrix<f64>,
    pub h_true: Vec<DMatrix<f64>>,
    pub labels: Vec<LabelMatrix>,
    pub sigmas_true: Vec<f64>,
}

/// Block-structured ground-truth basis.
pub fn gen_basis(spec: &SynthSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let m = spec.n_features();
    let stride = spec.l - spec.coh;
    let mut w = DMatrix::zeros(m, spec.k);
    for k in 0..spec.k - 1 {
        let start = k * stride;
        for i in start..start + spec.l {
            w[(i, k)] = spec.a;
        }
    }
    Ok(w)
}

/// Coefficients and labels of source `c` drawn from `rng`.
pub fn gen_coefficients_with<R: Rng>(spec: &SynthSpec, rng: &mut R) -> (DMatrix<f64>, LabelMatrix) {
    let k = spec.k;
    let n = spec.n_samples;
    let mut support = DMatrix::<u8>::zeros(k, n);
    for j in 0..n {
        let mut any = false;
        for kk in 0..k - 1 {
            if rng.random_bool(spec.p) {
                support[(kk, j)] = 1;
                any = true;
            }
        }
        if !any {
            support[(k - 1, j)] = 1;
        }
    }
    let mut h = support.map(f64::from);
    for mut col in h.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    (h, LabelMatrix::from_support(support))
}

fn source_rng(spec: &SynthSpec, c: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed ^ c as u64)
}

/// Coefficients and labels of source `c` (seeded by `seed ⊕ c`).
pub fn gen_coefficients(spec: &SynthSpec, c: usize) -> Result<(DMatrix<f64>, LabelMatrix)> {
    spec.validate()?;
    Ok(gen_coefficients_with(spec, &mut source_rng(spec, c)))
}

/// `X_c = W H_c + ε_c` with iid N(0, σ²_c) noise for every source.
pub fn gen_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let w_true = gen_basis(spec)?;
    let mut sources = Vec::with_capacity(spec.n_sources());
    let mut h_true = Vec::with_capacity(spec.n_sources());
    let mut labels = Vec::with_capacity(spec.n_sources());
    for (c, &sigma) in spec.sigmas.iter().enumerate() {
        let mut rng = source_rng(spec, c);
        let (h, lab) = gen_coefficients_with(spec, &mut rng);
        let mut x = &w_true * &h;
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * e;
        }
        sources.push(x);
        h_true.push(h);
        labels.push(lab);
    }
    Ok(SynthDataset {
        data: MultiViewData::new(sources)?,
        w_true,
        h_true,
        labels,
        sigmas_true: spec.sigmas.clone(),
    })
}
