//! Offline ranking metrics over impressions and the linear map from R/R* to
//! online revenue.
//!
//! R/R* compares the eCPM captured by the model's top-`m` ads with the eCPM
//! of the ground-truth top-`m` ads. NDCG, recall and ordered-pair accuracy
//! are provided for comparison; they ignore eCPM entirely.
//!
//! Every dataset-level value is the unweighted mean of per-impression values,
//! summed pairwise in impression order so that results are bit-stable under
//! parallel evaluation.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Impression};
use crate::numeric::{mean, pairwise_sum};
use crate::{Error, Result};

/// Gain applied to the ground-truth value `v` in DCG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdcgGain {
    #[default]
    Linear,
    /// `2^v - 1`
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Number of ground-truth ads eligible for exposure.
    pub m: usize,
    /// Model-side cutoff for NDCG and recall; `None` means `m`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_true")]
    pub skip_zero_denominator: bool,
    #[serde(default)]
    pub ndcg_gain: NdcgGain,
}

fn default_true() -> bool {
    true
}

impl MetricConfig {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            k: None,
            skip_zero_denominator: true,
            ndcg_gain: NdcgGain::Linear,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn cutoff(&self) -> usize {
        self.k.unwrap_or(self.m)
    }

    fn check(&self, imp: &Impression) -> Result<()> {
        let n = imp.len();
        if self.m == 0 || self.cutoff() == 0 {
            return Err(Error::Config("m and k must be at least 1".into()));
        }
        if self.m > n || self.cutoff() > n {
            return Err(Error::InvalidImpression {
                id: imp.id.clone(),
                reason: format!(
                    "m={} / k={} exceed impression size {n}",
                    self.m,
                    self.cutoff()
                ),
            });
        }
        Ok(())
    }
}

/// Indices of `values` sorted in descending order; ties keep the lower
/// original index first.
pub fn hard_permutation(values: &[f64]) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot sort an empty vector".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in sort input".into()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // sort_by is stable, so equal values keep index order
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    Ok(idx)
}

fn order_by_v(imp: &Impression) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..imp.len()).collect();
    idx.sort_by(|&a, &b| imp.ads[b].v.cmp(&imp.ads[a].v));
    idx
}

fn order_by_score(imp: &Impression) -> Result<Vec<usize>> {
    let scores = imp.scores().ok_or_else(|| Error::InvalidImpression {
        id: imp.id.clone(),
        reason: "missing model scores".into(),
    })?;
    hard_permutation(&scores)
}

// Sums in descending eCPM order. With eCPM non-increasing in v, the i-th
// largest captured value never exceeds the i-th largest ideal one, and rounded
// addition is monotone, so the ratio cannot round above 1.
fn ecpm_sum(imp: &Impression, picked: &[usize]) -> f64 {
    let mut vals: Vec<f64> = picked.iter().map(|&j| imp.ads[j].ecpm).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals.iter().sum()
}

/// R/R* of one impression, or `None` when R* is zero and the config asks to
/// skip such slates.
pub fn r_over_rstar_impression(imp: &Impression, cfg: &MetricConfig) -> Result<Option<f64>> {
    cfg.check(imp)?;
    let model = order_by_score(imp)?;
    let ideal = order_by_v(imp);
    let captured = ecpm_sum(imp, &model[..cfg.m]);
    let best = ecpm_sum(imp, &ideal[..cfg.m]);
    if best == 0.0 {
        return if cfg.skip_zero_denominator {
            Ok(None)
        } else {
            Err(Error::InvalidImpression {
                id: imp.id.clone(),
                reason: "ground-truth top-m eCPM is zero".into(),
            })
        };
    }
    Ok(Some(captured / best))
}

fn gain(v: i64, kind: NdcgGain) -> f64 {
    match kind {
        NdcgGain::Linear => v as f64,
        NdcgGain::Exponential => (v as f64).exp2() - 1.0,
    }
}

fn dcg(imp: &Impression, order: &[usize], k: usize, kind: NdcgGain) -> f64 {
    order[..k]
        .iter()
        .enumerate()
        .map(|(pos, &j)| gain(imp.ads[j].v, kind) / ((pos + 2) as f64).log2())
        .sum()
}

/// NDCG@k of one impression; `None` when the ideal DCG is not positive.
pub fn ndcg_impression(imp: &Impression, cfg: &MetricConfig) -> Result<Option<f64>> {
    cfg.check(imp)?;
    let k = cfg.cutoff();
    let model = order_by_score(imp)?;
    let ideal_dcg = dcg(imp, &order_by_v(imp), k, cfg.ndcg_gain);
    if ideal_dcg <= 0.0 {
        return Ok(None);
    }
    Ok(Some(dcg(imp, &model, k, cfg.ndcg_gain) / ideal_dcg))
}

/// `|model top-k ∩ ground-truth top-m| / m`.
pub fn recall_impression(imp: &Impression, cfg: &MetricConfig) -> Result<Option<f64>> {
    cfg.check(imp)?;
    let model = order_by_score(imp)?;
    let truth: HashSet<usize> = order_by_v(imp)[..cfg.m].iter().copied().collect();
    let hits = model[..cfg.cutoff()]
        .iter()
        .filter(|j| truth.contains(j))
        .count();
    Ok(Some(hits as f64 / cfg.m as f64))
}

/// Fraction of pairs with `v_j > v_h` that the model scores strictly in the
/// same order. Score ties count as misses. `None` for single-ad slates.
pub fn opa_impression(imp: &Impression) -> Result<Option<f64>> {
    let scores = imp.scores().ok_or_else(|| Error::InvalidImpression {
        id: imp.id.clone(),
        reason: "missing model scores".into(),
    })?;
    let n = imp.len();
    if n < 2 {
        return Ok(None);
    }
    let mut pairs = 0usize;
    let mut concordant = 0usize;
    for j in 0..n {
        for h in 0..n {
            if imp.ads[j].v > imp.ads[h].v {
                pairs += 1;
                if scores[j] > scores[h] {
                    concordant += 1;
                }
            }
        }
    }
    Ok(Some(concordant as f64 / pairs as f64))
}

/// Dataset-level mean of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMean {
    pub mean: f64,
    pub included: usize,
    pub skipped: usize,
}

fn per_impression<F>(ds: &Dataset, f: F) -> Result<Vec<Option<f64>>>
where
    F: Fn(&Impression) -> Result<Option<f64>> + Sync + Send,
{
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ds.impressions.par_iter().map(f).collect()
}

fn summarize(values: &[Option<f64>]) -> Result<MetricMean> {
    let included: Vec<f64> = values.iter().flatten().copied().collect();
    let mean = mean(&included).ok_or(Error::NoScorableImpressions)?;
    Ok(MetricMean {
        mean,
        included: included.len(),
        skipped: values.len() - included.len(),
    })
}

pub fn r_over_rstar(ds: &Dataset, cfg: &MetricConfig) -> Result<MetricMean> {
    summarize(&per_impression(ds, |imp| {
        r_over_rstar_impression(imp, cfg)
    })?)
}

pub fn ndcg(ds: &Dataset, cfg: &MetricConfig) -> Result<MetricMean> {
    summarize(&per_impression(ds, |imp| ndcg_impression(imp, cfg))?)
}

pub fn recall(ds: &Dataset, cfg: &MetricConfig) -> Result<MetricMean> {
    summarize(&per_impression(ds, |imp| recall_impression(imp, cfg))?)
}

pub fn opa(ds: &Dataset) -> Result<MetricMean> {
    summarize(&per_impression(ds, opa_impression)?)
}

/// Per-impression values of all four metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionMetrics {
    pub id: String,
    pub r_over_rstar: Option<f64>,
    pub ndcg: Option<f64>,
    pub recall: Option<f64>,
    pub opa: Option<f64>,
}

/// Compact summary written as the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub r_over_rstar: Option<f64>,
    pub ndcg: Option<f64>,
    pub recall: Option<f64>,
    pub opa: Option<f64>,
    /// Impressions excluded from R/R* (zero ground-truth revenue).
    pub skipped: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub summary: MetricSummary,
    pub per_impression: Vec<ImpressionMetrics>,
}

pub fn evaluate(ds: &Dataset, cfg: &MetricConfig) -> Result<MetricReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_impression = ds
        .impressions
        .par_iter()
        .map(|imp| {
            Ok(ImpressionMetrics {
                id: imp.id.clone(),
                r_over_rstar: r_over_rstar_impression(imp, cfg)?,
                ndcg: ndcg_impression(imp, cfg)?,
                recall: recall_impression(imp, cfg)?,
                opa: opa_impression(imp)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let column = |f: fn(&ImpressionMetrics) -> Option<f64>| {
        let vals: Vec<f64> = per_impression.iter().filter_map(f).collect();
        mean(&vals)
    };
    let skipped = per_impression
        .iter()
        .filter(|p| p.r_over_rstar.is_none())
        .count();
    Ok(MetricReport {
        summary: MetricSummary {
            r_over_rstar: column(|p| p.r_over_rstar),
            ndcg: column(|p| p.ndcg),
            recall: column(|p| p.recall),
            opa: column(|p| p.opa),
            skipped,
            n: ds.len(),
        },
        per_impression,
    })
}

/// Linear map from R/R* to relative online revenue, with its fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueMap {
    pub slope: f64,
    pub intercept: f64,
    /// Defaults describe a hand-specified map, as in [`RevenueMap::linear`].
    #[serde(default = "one")]
    pub r_squared: f64,
    #[serde(default)]
    pub n_points: usize,
    #[serde(default)]
    pub residuals: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

impl RevenueMap {
    /// A hand-specified map with no fit behind it.
    pub fn linear(slope: f64, intercept: f64) -> Self {
        Self {
            slope,
            intercept,
            r_squared: 1.0,
            n_points: 0,
            residuals: Vec::new(),
        }
    }

    pub fn apply(&self, r: f64) -> f64 {
        self.slope * r + self.intercept
    }
}

pub fn apply_revenue_map(g: &RevenueMap, r: f64) -> f64 {
    g.apply(r)
}

/// Ordinary least squares of revenue on R/R*.
///
/// When every revenue value is identical the fitted line is exact and R² is
/// reported as 1.
pub fn fit_revenue_map(points: &[(f64, f64)]) -> Result<RevenueMap> {
    if points.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "revenue map needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidInput("non-finite revenue point".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let x_bar = mean(&xs).unwrap();
    let y_bar = mean(&ys).unwrap();

    let sxx = pairwise_sum(&xs.iter().map(|x| (x - x_bar).powi(2)).collect::<Vec<_>>());
    if sxx == 0.0 {
        return Err(Error::InvalidInput(
            "all R/R* values are equal; slope is undetermined".into(),
        ));
    }
    let sxy = pairwise_sum(
        &points
            .iter()
            .map(|(x, y)| (x - x_bar) * (y - y_bar))
            .collect::<Vec<_>>(),
    );
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let residuals: Vec<f64> = points
        .iter()
        .map(|(x, y)| y - (slope * x + intercept))
        .collect();
    let ss_res = pairwise_sum(&residuals.iter().map(|r| r * r).collect::<Vec<_>>());
    let ss_tot = pairwise_sum(&ys.iter().map(|y| (y - y_bar).powi(2)).collect::<Vec<_>>());
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(RevenueMap {
        slope,
        intercept,
        r_squared,
        n_points: points.len(),
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AdRecord;

    fn imp(v: &[i64], ecpm: &[f64], scores: &[f64]) -> Impression {
        Impression {
            id: "t".into(),
            ads: v
                .iter()
                .zip(ecpm)
                .zip(scores)
                .map(|((&v, &ecpm), &s)| AdRecord {
                    v,
                    ecpm,
                    score: Some(s),
                })
                .collect(),
        }
    }

    #[test]
    fn hard_permutation_examples() {
        assert_eq!(hard_permutation(&[0.1, 0.9, 0.5]).unwrap(), vec![1, 2, 0]);
        assert_eq!(hard_permutation(&[0.5, 0.5]).unwrap(), vec![0, 1]);
        assert_eq!(hard_permutation(&[7.0]).unwrap(), vec![0]);
        assert!(hard_permutation(&[1.0, f64::NAN]).is_err());
        assert!(hard_permutation(&[]).is_err());
    }

    #[test]
    fn r_over_rstar_hand_example() {
        let i = imp(&[4, 3, 2, 1], &[5.0, 3.0, 2.0, 0.0], &[0.9, 0.1, 0.8, 0.2]);
        let r = r_over_rstar_impression(&i, &MetricConfig::new(2)).unwrap();
        assert_eq!(r, Some(0.875));
        let ds = Dataset::new(vec![i]);
        assert_eq!(
            r_over_rstar(&ds, &MetricConfig::new(2)).unwrap().mean,
            0.875
        );
    }

    #[test]
    fn r_over_rstar_perfect_and_constant() {
        let i = imp(&[4, 3, 2, 1], &[5.0, 3.0, 2.0, 0.0], &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(
            r_over_rstar_impression(&i, &MetricConfig::new(2)).unwrap(),
            Some(1.0)
        );
        let i = imp(&[1, 2, 3], &[0.7, 0.7, 0.7], &[0.3, 0.1, 0.2]);
        assert_eq!(
            r_over_rstar_impression(&i, &MetricConfig::new(2)).unwrap(),
            Some(1.0)
        );
    }

    #[test]
    fn r_over_rstar_mean_and_skips() {
        let a = imp(&[2, 1], &[1.0, 1.0], &[0.0, 1.0]);
        let b = imp(&[2, 1], &[2.0, 2.0], &[1.0, 0.0]);
        // a: model picks ad 1 (ecpm 1) vs ideal ad 0 (ecpm 1) -> 1.0
        let half = imp(&[2, 1], &[2.0, 1.0], &[0.0, 1.0]);
        let ds = Dataset::new(vec![a, half]);
        let m = r_over_rstar(&ds, &MetricConfig::new(1)).unwrap();
        assert_eq!(m.mean, 0.75);

        let zero = imp(&[2, 1], &[0.0, 0.0], &[0.0, 1.0]);
        let ds = Dataset::new(vec![zero.clone(), b]);
        let m = r_over_rstar(&ds, &MetricConfig::new(1)).unwrap();
        assert_eq!((m.mean, m.included, m.skipped), (1.0, 1, 1));

        let ds = Dataset::new(vec![zero.clone(), zero.clone()]);
        assert!(matches!(
            r_over_rstar(&ds, &MetricConfig::new(1)),
            Err(Error::NoScorableImpressions)
        ));
        let mut strict = MetricConfig::new(1);
        strict.skip_zero_denominator = false;
        assert!(r_over_rstar_impression(&zero, &strict).is_err());
    }

    #[test]
    fn missing_scores_and_oversized_m() {
        let mut i = imp(&[2, 1], &[1.0, 1.0], &[0.0, 1.0]);
        assert!(r_over_rstar_impression(&i, &MetricConfig::new(3)).is_err());
        i.ads[0].score = None;
        assert!(r_over_rstar_impression(&i, &MetricConfig::new(1)).is_err());
        assert!(opa_impression(&i).is_err());
    }

    #[test]
    fn ndcg_hand_example() {
        let i = imp(&[3, 1, 2], &[1.0; 3], &[0.9, 0.8, 0.1]);
        let v = ndcg_impression(&i, &MetricConfig::new(2)).unwrap().unwrap();
        let dcg = 3.0 + 1.0 / 3f64.log2();
        let idcg = 3.0 + 2.0 / 3f64.log2();
        assert!((v - dcg / idcg).abs() < 1e-15);
        assert!((v - 0.85196).abs() < 1e-5);

        let perfect = imp(&[3, 1, 2], &[1.0; 3], &[3.0, 1.0, 2.0]);
        assert_eq!(
            ndcg_impression(&perfect, &MetricConfig::new(2)).unwrap(),
            Some(1.0)
        );
        let single = imp(&[5], &[1.0], &[0.0]);
        assert_eq!(
            ndcg_impression(&single, &MetricConfig::new(1)).unwrap(),
            Some(1.0)
        );
    }

    #[test]
    fn recall_examples() {
        let i = imp(&[4, 3, 2, 1], &[5.0, 3.0, 2.0, 0.0], &[0.9, 0.1, 0.8, 0.2]);
        assert_eq!(
            recall_impression(&i, &MetricConfig::new(2)).unwrap(),
            Some(0.5)
        );
        assert_eq!(
            recall_impression(&i, &MetricConfig::new(2).with_k(4)).unwrap(),
            Some(1.0)
        );
        let perfect = imp(&[4, 3, 2, 1], &[1.0; 4], &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(
            recall_impression(&perfect, &MetricConfig::new(3)).unwrap(),
            Some(1.0)
        );
    }

    #[test]
    fn opa_examples() {
        let i = imp(&[3, 1, 2], &[1.0; 3], &[0.9, 0.8, 0.1]);
        assert_eq!(opa_impression(&i).unwrap(), Some(2.0 / 3.0));
        let perfect = imp(&[3, 1, 2], &[1.0; 3], &[3.0, 1.0, 2.0]);
        assert_eq!(opa_impression(&perfect).unwrap(), Some(1.0));
        let reversed = imp(&[3, 1, 2], &[1.0; 3], &[1.0, 3.0, 2.0]);
        assert_eq!(opa_impression(&reversed).unwrap(), Some(0.0));
        let tied = imp(&[2, 1], &[1.0; 2], &[0.5, 0.5]);
        assert_eq!(opa_impression(&tied).unwrap(), Some(0.0));
        let single = imp(&[1], &[1.0], &[0.5]);
        assert_eq!(opa_impression(&single).unwrap(), None);
    }

    #[test]
    fn report_matches_individual_metrics() {
        let ds = Dataset::new(vec![
            imp(&[4, 3, 2, 1], &[5.0, 3.0, 2.0, 0.0], &[0.9, 0.1, 0.8, 0.2]),
            imp(&[3, 1, 2], &[1.0; 3], &[0.9, 0.8, 0.1]),
        ]);
        let cfg = MetricConfig::new(2);
        let report = evaluate(&ds, &cfg).unwrap();
        assert_eq!(
            report.summary.r_over_rstar,
            Some(r_over_rstar(&ds, &cfg).unwrap().mean)
        );
        assert_eq!(report.summary.ndcg, Some(ndcg(&ds, &cfg).unwrap().mean));
        assert_eq!(report.summary.recall, Some(recall(&ds, &cfg).unwrap().mean));
        assert_eq!(report.summary.opa, Some(opa(&ds).unwrap().mean));
        assert_eq!(report.summary.n, 2);
        assert_eq!(report.per_impression.len(), 2);
    }

    #[test]
    fn revenue_map_exact_line() {
        let g = fit_revenue_map(&[(1.0, 3.0), (2.0, 5.0), (3.0, 7.0)]).unwrap();
        assert_eq!((g.slope, g.intercept, g.r_squared), (2.0, 1.0, 1.0));
        assert_eq!(g.n_points, 3);
    }

    #[test]
    fn revenue_map_zero_r_squared() {
        let g = fit_revenue_map(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]).unwrap();
        assert_eq!(g.slope, 0.0);
        assert_eq!(g.intercept, 1.0 / 3.0);
        assert_eq!(g.r_squared, 0.0);
        assert_eq!(g.residuals.len(), 3);
    }

    #[test]
    fn revenue_map_errors() {
        assert!(fit_revenue_map(&[(1.0, 2.0)]).is_err());
        assert!(fit_revenue_map(&[(1.0, 2.0), (1.0, 3.0)]).is_err());
        assert!(fit_revenue_map(&[(1.0, f64::NAN), (2.0, 3.0)]).is_err());
    }

    #[test]
    fn apply_map() {
        let g = RevenueMap::linear(2.0, 1.0);
        assert_eq!(apply_revenue_map(&g, 3.0), 7.0);
        let flat = RevenueMap::linear(0.0, 0.4);
        assert_eq!(flat.apply(-10.0), 0.4);
        assert_eq!(flat.apply(10.0), 0.4);
        assert!(g.apply(0.2) < g.apply(0.3));
    }
}
