//! NeuralSort soft permutations and the listwise retrieval losses built on
//! them.
//!
//! The losses are evaluated, not optimized: the uncertainty weight `alpha`
//! is an input here rather than a trained scalar.

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Impression};
use crate::numeric::mean;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArfConfig {
    pub m: usize,
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Floor applied inside logarithms.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_tau() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-30
}

impl ArfConfig {
    pub fn new(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            tau: default_tau(),
            alpha: default_alpha(),
            epsilon: default_epsilon(),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.m == 0 || self.k == 0 || self.m > n || self.k > n {
            return Err(Error::InvalidInput(format!(
                "m={} and k={} must lie in 1..={n}",
                self.m, self.k
            )));
        }
        Ok(())
    }
}

/// Row-stochastic relaxation of the descending sort permutation, stored
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPermutation {
    n: usize,
    data: Vec<f64>,
}

impl SoftPermutation {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Column sums over the first `rows` rows.
    pub fn head_column_sums(&self, rows: usize) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for i in 0..rows {
            for (s, p) in sums.iter_mut().zip(self.row(i)) {
                *s += p;
            }
        }
        sums
    }

    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for j in 1..self.n {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// NeuralSort relaxation of the descending permutation of `s`.
///
/// Row `i` (0-based) is `softmax(((n - 1 - 2i) * s - A 1) / tau)` where
/// `(A 1)_j = sum_t |s_j - s_t|`.
pub fn soft_permutation(s: &[f64], tau: f64) -> Result<SoftPermutation> {
    if s.is_empty() {
        return Err(Error::InvalidInput("empty score vector".into()));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = s.len();
    let abs_row_sums: Vec<f64> = s
        .iter()
        .map(|sj| s.iter().map(|st| (sj - st).abs()).sum())
        .collect();

    let mut data = vec![0.0; n * n];
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let scale = n as f64 - 1.0 - 2.0 * i as f64;
        for j in 0..n {
            logits[j] = (scale * s[j] - abs_row_sums[j]) / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut data[i * n..(i + 1) * n];
        let mut total = 0.0;
        for (p, l) in row.iter_mut().zip(&logits) {
            *p = (l - max).exp();
            total += *p;
        }
        row.iter_mut().for_each(|p| *p /= total);
    }
    Ok(SoftPermutation { n, data })
}

/// A loss value plus the number of logarithm arguments that had to be
/// floored at `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub clamped: usize,
}

fn check_pair(scores: &[f64], v: &[f64], cfg: &ArfConfig) -> Result<()> {
    if scores.len() != v.len() {
        return Err(Error::InvalidInput(format!(
            "score and value vectors differ in length ({} vs {})",
            scores.len(),
            v.len()
        )));
    }
    cfg.check(scores.len())
}

fn floored_ln(x: f64, eps: f64, clamped: &mut usize) -> f64 {
    if x < eps {
        *clamped += 1;
        eps.ln()
    } else {
        x.ln()
    }
}

/// Relaxed top-k recall loss: cross-entropy between the column mass of the
/// first `k` rows of the ground-truth permutation and the normalized column
/// mass of the first `m` rows of the model permutation.
pub fn l_relax(scores: &[f64], v: &[f64], cfg: &ArfConfig) -> Result<LossValue> {
    check_pair(scores, v, cfg)?;
    let truth = soft_permutation(v, cfg.tau)?.head_column_sums(cfg.k);
    let model = soft_permutation(scores, cfg.tau)?.head_column_sums(cfg.m);
    let mut clamped = 0;
    let m = cfg.m as f64;
    let value = -truth
        .iter()
        .zip(&model)
        .map(|(t, p)| t * floored_ln(p / m, cfg.epsilon, &mut clamped))
        .sum::<f64>();
    Ok(LossValue { value, clamped })
}

/// Row-wise cross-entropy between the ground-truth and model permutations.
pub fn l_global(scores: &[f64], v: &[f64], cfg: &ArfConfig) -> Result<LossValue> {
    check_pair(scores, v, cfg)?;
    let truth = soft_permutation(v, cfg.tau)?;
    let model = soft_permutation(scores, cfg.tau)?;
    let mut clamped = 0;
    let value = -truth
        .data
        .iter()
        .zip(&model.data)
        .map(|(t, p)| t * floored_ln(*p, cfg.epsilon, &mut clamped))
        .sum::<f64>();
    Ok(LossValue { value, clamped })
}

/// All three loss terms of one slate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArfLosses {
    pub relax: f64,
    pub global: f64,
    pub total: f64,
    pub clamped: usize,
}

/// `L_relax + L_global / (2 alpha^2) + ln|alpha|`.
pub fn l_total(scores: &[f64], v: &[f64], cfg: &ArfConfig) -> Result<ArfLosses> {
    if cfg.alpha == 0.0 || !cfg.alpha.is_finite() {
        return Err(Error::Config(format!(
            "alpha must be finite and nonzero, got {}",
            cfg.alpha
        )));
    }
    let relax = l_relax(scores, v, cfg)?;
    let global = l_global(scores, v, cfg)?;
    let total = combine(relax.value, global.value, cfg.alpha);
    if relax.clamped + global.clamped > 0 {
        log::debug!(
            "{} log arguments floored at {:e}",
            relax.clamped + global.clamped,
            cfg.epsilon
        );
    }
    Ok(ArfLosses {
        relax: relax.value,
        global: global.value,
        total,
        clamped: relax.clamped + global.clamped,
    })
}

pub(crate) fn combine(relax: f64, global: f64, alpha: f64) -> f64 {
    relax + global / (2.0 * alpha * alpha) + alpha.abs().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionLosses {
    pub id: String,
    #[serde(flatten)]
    pub losses: ArfLosses,
}

pub fn evaluate_impression(imp: &Impression, cfg: &ArfConfig) -> Result<ImpressionLosses> {
    let scores = imp.scores().ok_or_else(|| Error::InvalidImpression {
        id: imp.id.clone(),
        reason: "missing model scores".into(),
    })?;
    let losses = l_total(&scores, &imp.values(), cfg).map_err(|e| match e {
        Error::InvalidInput(reason) => Error::InvalidImpression {
            id: imp.id.clone(),
            reason,
        },
        other => other,
    })?;
    Ok(ImpressionLosses {
        id: imp.id.clone(),
        losses,
    })
}

/// Per-impression losses and their unweighted means.
pub fn evaluate_dataset(
    ds: &Dataset,
    cfg: &ArfConfig,
) -> Result<(Vec<ImpressionLosses>, ArfLosses)> {
    use rayon::prelude::*;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows: Vec<ImpressionLosses> = ds
        .impressions
        .par_iter()
        .map(|imp| evaluate_impression(imp, cfg))
        .collect::<Result<_>>()?;
    let col = |f: fn(&ArfLosses) -> f64| {
        mean(&rows.iter().map(|r| f(&r.losses)).collect::<Vec<_>>()).unwrap()
    };
    let means = ArfLosses {
        relax: col(|l| l.relax),
        global: col(|l| l.global),
        total: col(|l| l.total),
        clamped: rows.iter().map(|r| r.losses.clamped).sum(),
    };
    if means.clamped > 0 {
        log::warn!(
            "{} log arguments floored at {:e} across {} impressions",
            means.clamped,
            cfg.epsilon,
            rows.iter().filter(|r| r.losses.clamped > 0).count()
        );
    }
    Ok((rows, means))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_permutation() {
        let p = soft_permutation(&[3.7], 0.2).unwrap();
        assert_eq!(p.row(0), &[1.0]);
    }

    #[test]
    fn two_element_permutation() {
        let p = soft_permutation(&[1.0, 0.0], 1.0).unwrap();
        let hi = 1.0 / (1.0 + (-1f64).exp());
        let lo = 1.0 - hi;
        for (got, want) in [
            (p.get(0, 0), hi),
            (p.get(0, 1), lo),
            (p.get(1, 0), lo),
            (p.get(1, 1), hi),
        ] {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((p.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn cold_permutation_is_hard() {
        let p = soft_permutation(&[1.0, 0.0], 1e-6).unwrap();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12 && p.get(0, 1) < 1e-12);
        assert!((p.get(1, 1) - 1.0).abs() < 1e-12 && p.get(1, 0) < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(soft_permutation(&[1.0, f64::NAN], 1.0).is_err());
        assert!(soft_permutation(&[1.0], 0.0).is_err());
        assert!(soft_permutation(&[1.0], -1.0).is_err());
        assert!(soft_permutation(&[], 1.0).is_err());
        let cfg = ArfConfig::new(1, 1);
        assert!(l_relax(&[1.0, 2.0], &[1.0], &cfg).is_err());
        assert!(l_relax(&[1.0], &[1.0], &ArfConfig::new(2, 1)).is_err());
    }

    #[test]
    fn singleton_losses_vanish() {
        let cfg = ArfConfig::new(1, 1);
        assert_eq!(l_relax(&[0.3], &[5.0], &cfg).unwrap().value, 0.0);
        assert_eq!(l_global(&[0.3], &[5.0], &cfg).unwrap().value, 0.0);
        let mut e = cfg.clone();
        e.alpha = std::f64::consts::E;
        assert!((l_total(&[0.3], &[5.0], &e).unwrap().total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cold_relax_limit_is_m_log_m() {
        let s = [0.9, 0.1, 0.5, 0.3, 0.7];
        for m in 1..=4 {
            let mut cfg = ArfConfig::new(m, m);
            cfg.tau = 1e-6;
            let l = l_relax(&s, &s, &cfg).unwrap();
            let want = m as f64 * (m as f64).ln();
            assert!(
                (l.value - want).abs() < 1e-9,
                "m={m}: {} vs {want}",
                l.value
            );
        }
    }

    #[test]
    fn cold_global_limit_is_zero() {
        let s = [0.9, 0.1, 0.5, 0.3];
        let mut cfg = ArfConfig::new(2, 2);
        cfg.tau = 1e-6;
        assert!(l_global(&s, &s, &cfg).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn total_combines_terms() {
        let s = [0.2, 0.9, 0.4];
        let v = [1.0, 3.0, 2.0];
        let cfg = ArfConfig::new(2, 1);
        let t = l_total(&s, &v, &cfg).unwrap();
        assert!((t.total - (t.relax + 0.5 * t.global)).abs() < 1e-15);

        let mut big = cfg.clone();
        big.alpha = 1e8;
        let t = l_total(&s, &v, &big).unwrap();
        assert!((t.total - (t.relax + 1e8f64.ln())).abs() < 1e-12);

        let mut zero = cfg;
        zero.alpha = 0.0;
        assert!(l_total(&s, &v, &zero).is_err());
    }

    #[test]
    fn tiny_tau_reports_clamping() {
        let mut cfg = ArfConfig::new(1, 1);
        cfg.tau = 1e-9;
        let l = l_global(&[0.0, 1.0], &[1.0, 0.0], &cfg).unwrap();
        assert!(l.clamped > 0);
        assert!(l.value.is_finite());
    }
}
