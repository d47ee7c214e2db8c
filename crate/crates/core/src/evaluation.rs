//! Clustering quality via AUC, noise-level recovery, and variance-based
//! feature selection against the fitted per-source noise floor.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{BjmdError, Result};
use crate::model::MultiViewData;
use crate::par;

/// Binary K×N cluster-membership indicators for one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    entries: DMatrix<u8>,
}

impl LabelMatrix {
    /// Rejects non-binary entries and empty columns.
    pub fn new(entries: DMatrix<u8>) -> Result<Self> {
        if entries.iter().any(|v| *v > 1) {
            return Err(BjmdError::Invariant("labels must be 0 or 1".into()));
        }
        if let Some(j) = (0..entries.ncols()).find(|&j| entries.column(j).iter().all(|v| *v == 0)) {
            return Err(BjmdError::Invariant(format!("label column {j} is empty")));
        }
        Ok(Self { entries })
    }

    pub(crate) fn from_support(entries: DMatrix<u8>) -> Self {
        Self { entries }
    }

    pub fn get(&self, k: usize, j: usize) -> u8 {
        self.entries[(k, j)]
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<u8> {
        &self.entries
    }

    pub fn row(&self, k: usize) -> Vec<bool> {
        self.entries.row(k).iter().map(|v| *v == 1).collect()
    }

    /// Restricts to a contiguous block of columns.
    pub fn columns(&self, start: usize, n: usize) -> LabelMatrix {
        LabelMatrix { entries: self.entries.columns(start, n).into_owned() }
    }
}

/// Area under the ROC curve in Mann–Whitney form; ties earn half credit.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(BjmdError::Shape(format!("{} labels vs {} scores", labels.len(), scores.len())));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(BjmdError::DegenerateLabels(format!("{n_pos} positives and {n_neg} negatives")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(BjmdError::NumericOverflow("NaN score".into()));
    }
    // Midrank of each tie group, then U = R_pos − n_pos(n_pos+1)/2.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        rank_sum_pos += midrank * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-label-row best AUC and their mean for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    /// `r_k` for every label row; `None` for rows excluded as degenerate.
    pub per_row: Vec<Option<f64>>,
    /// Mean of the scored rows.
    pub average: f64,
    pub excluded_rows: usize,
}

/// For every label row k, the best AUC any coefficient row achieves when
/// ranking samples against that row; averaged over the label rows. Label rows
/// that are all-0 or all-1 cannot be scored and are excluded.
pub fn cluster_metric(h: &DMatrix<f64>, labels: &LabelMatrix) -> Result<ClusterScore> {
    if h.ncols() != labels.ncols() {
        return Err(BjmdError::Shape(format!(
            "coefficients have {} columns, labels {}",
            h.ncols(),
            labels.ncols()
        )));
    }
    let score_rows: Vec<Vec<f64>> = (0..h.nrows()).map(|k| h.row(k).iter().copied().collect()).collect();
    let mut per_row = Vec::with_capacity(labels.nrows());
    for k in 0..labels.nrows() {
        let lab = labels.row(k);
        let pos = lab.iter().filter(|v| **v).count();
        if pos == 0 || pos == lab.len() {
            log::warn!("label row {k} is degenerate and excluded from the metric");
            per_row.push(None);
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for s in &score_rows {
            best = best.max(auc(&lab, s)?);
        }
        per_row.push(Some(best));
    }
    let scored: Vec<f64> = per_row.iter().flatten().copied().collect();
    let excluded_rows = per_row.len() - scored.len();
    if scored.is_empty() {
        return Err(BjmdError::DegenerateLabels("no label row can be scored".into()));
    }
    let average = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(ClusterScore { per_row, average, excluded_rows })
}

/// `|σ_est − σ_true| / σ_true` per source.
pub fn noise_recovery(sigmas_est: &[f64], sigmas_true: &[f64]) -> Result<Vec<f64>> {
    if sigmas_est.len() != sigmas_true.len() {
        return Err(BjmdError::Shape("sigma vectors differ in length".into()));
    }
    if sigmas_true.iter().chain(sigmas_est).any(|s| !(*s > 0.0)) {
        return Err(BjmdError::Invariant("standard deviations must be > 0".into()));
    }
    Ok(sigmas_est.iter().zip(sigmas_true).map(|(e, t)| (e - t).abs() / t).collect())
}

/// How per-source significance is combined into a feature decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    /// Significant in at least one source.
    #[default]
    Any,
    /// Significant in every source.
    All,
}

/// Outcome of [`select_features`]; matrices are indexed `[source][feature]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelectReport {
    pub p_values: Vec<Vec<f64>>,
    /// Bonferroni-adjusted over all C·M tests.
    pub q_values: Vec<Vec<f64>>,
    pub selected: Vec<usize>,
    pub significance: f64,
    pub mode: SelectMode,
}

/// Upper-tail χ² test of each feature's per-source sample variance against
/// the fitted noise variance: `(N_c − 1) s²/σ²_c ~ χ²(N_c − 1)` under the null.
pub fn select_features(
    data: &MultiViewData,
    sigma2_est: &[f64],
    significance: f64,
    mode: SelectMode,
) -> Result<FeatureSelectReport> {
    if sigma2_est.len() != data.n_sources() {
        return Err(BjmdError::Shape("one noise variance per source is required".into()));
    }
    if sigma2_est.iter().any(|s| !(*s > 0.0)) {
        return Err(BjmdError::Invariant("noise variances must be > 0".into()));
    }
    if !(significance > 0.0 && significance < 1.0) {
        return Err(BjmdError::Invariant("significance must lie in (0,1)".into()));
    }
    let m = data.n_features();
    let n_tests = (m * data.n_sources()) as f64;
    let mut p_values = Vec::with_capacity(data.n_sources());
    for (c, x) in data.sources().iter().enumerate() {
        let n = x.ncols();
        if n < 2 {
            return Err(BjmdError::Invariant(format!("source {c} needs at least two samples")));
        }
        let dof = (n - 1) as f64;
        let chi = ChiSquared::new(dof).map_err(|e| BjmdError::Invariant(e.to_string()))?;
        let s2 = sigma2_est[c];
        let p = par::map_range(m, true, |i| {
            let row = x.row(i);
            let mean = row.sum() / n as f64;
            let ss: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum();
            if ss <= 0.0 {
                1.0
            } else {
                chi.sf(ss / s2)
            }
        });
        p_values.push(p);
    }
    let q_values: Vec<Vec<f64>> =
        p_values.iter().map(|ps| ps.iter().map(|p| (p * n_tests).min(1.0)).collect()).collect();
    let selected = (0..m)
        .filter(|&i| {
            let mut qs = q_values.iter().map(|q| q[i]);
            match mode {
                SelectMode::Any => qs.any(|q| q < significance),
                SelectMode::All => qs.all(|q| q < significance),
            }
        })
        .collect();
    Ok(FeatureSelectReport { p_values, q_values, selected, significance, mode })
}
