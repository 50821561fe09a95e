//! Independent reference implementations used by the property tests.
//!
//! Everything here is written from the definitions with explicit loops so it
//! shares no code with the library.
#![allow(dead_code)]

use adscale::domain::{AdRecord, Impression};
use rand::seq::SliceRandom;
use rand::Rng;

/// Insertion sort of indices by descending key; equal keys keep index order.
pub fn ranking(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::with_capacity(keys.len());
    for j in 0..keys.len() {
        let mut at = order.len();
        while at > 0 && keys[order[at - 1]] < keys[j] {
            at -= 1;
        }
        order.insert(at, j);
    }
    order
}

fn v_keys(imp: &Impression) -> Vec<f64> {
    imp.ads.iter().map(|a| a.v as f64).collect()
}

fn s_keys(imp: &Impression) -> Vec<f64> {
    imp.ads.iter().map(|a| a.score.unwrap()).collect()
}

pub fn r_over_rstar(imp: &Impression, m: usize) -> Option<f64> {
    let model = ranking(&s_keys(imp));
    let ideal = ranking(&v_keys(imp));
    // both sums run from the largest eCPM down
    let total = |order: &[usize]| {
        let mut picked: Vec<f64> = order[..m].iter().map(|&j| imp.ads[j].ecpm).collect();
        for i in 1..picked.len() {
            let mut at = i;
            while at > 0 && picked[at - 1] < picked[at] {
                picked.swap(at - 1, at);
                at -= 1;
            }
        }
        let mut sum = 0.0;
        for x in picked {
            sum += x;
        }
        sum
    };
    let got = total(&model);
    let best = total(&ideal);
    if best == 0.0 {
        None
    } else {
        Some(got / best)
    }
}

pub fn ndcg(imp: &Impression, k: usize) -> Option<f64> {
    let dcg = |order: &[usize]| {
        let mut total = 0.0;
        for p in 0..k {
            total += imp.ads[order[p]].v as f64 / ((p + 2) as f64).log2();
        }
        total
    };
    let ideal = dcg(&ranking(&v_keys(imp)));
    if ideal <= 0.0 {
        None
    } else {
        Some(dcg(&ranking(&s_keys(imp))) / ideal)
    }
}

pub fn recall(imp: &Impression, m: usize, k: usize) -> f64 {
    let model = ranking(&s_keys(imp));
    let ideal = ranking(&v_keys(imp));
    let mut hits = 0;
    for a in &model[..k] {
        for b in &ideal[..m] {
            if a == b {
                hits += 1;
            }
        }
    }
    hits as f64 / m as f64
}

pub fn opa(imp: &Impression) -> Option<f64> {
    let n = imp.ads.len();
    let (mut pairs, mut good) = (0u32, 0u32);
    for j in 0..n {
        for h in 0..n {
            let (a, b) = (&imp.ads[j], &imp.ads[h]);
            if a.v > b.v {
                pairs += 1;
                if a.score.unwrap() > b.score.unwrap() {
                    good += 1;
                }
            }
        }
    }
    if pairs == 0 {
        None
    } else {
        Some(good as f64 / pairs as f64)
    }
}

/// Random slate with distinct `v`, coarse scores (so ties occur) and eCPM
/// that may or may not follow `v`.
pub fn random_impression(rng: &mut impl Rng, n: usize, monotone_ecpm: bool) -> Impression {
    let mut vs: Vec<i64> = Vec::with_capacity(n);
    let mut v = 0;
    for _ in 0..n {
        v += rng.random_range(1..=3);
        vs.push(v);
    }
    vs.shuffle(rng);
    let mut ecpm: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(0.0..10.0)
            }
        })
        .collect();
    if monotone_ecpm {
        // larger v gets larger eCPM
        ecpm.sort_by(f64::total_cmp);
        let mut by_v: Vec<usize> = (0..n).collect();
        by_v.sort_by_key(|&j| vs[j]);
        let mut sorted = vec![0.0; n];
        for (rank, &j) in by_v.iter().enumerate() {
            sorted[j] = ecpm[rank];
        }
        ecpm = sorted;
    }
    let ads = (0..n)
        .map(|j| AdRecord {
            v: vs[j],
            ecpm: ecpm[j],
            score: Some(rng.random_range(0..6) as f64 * 0.25),
        })
        .collect();
    Impression {
        id: "rand".into(),
        ads,
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Soft permutation built from the matrix form: row `i` (1-based) is
/// `softmax(((n + 1 - 2i) s - A 1) / tau)` with `A[j][t] = |s_j - s_t|`.
pub fn soft_perm(s: &[f64], tau: f64) -> Vec<Vec<f64>> {
    let n = s.len();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|t| (s[j] - s[t]).abs()).collect())
        .collect();
    let a1: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    (1..=n)
        .map(|i| {
            let c = (n + 1) as f64 - 2.0 * i as f64;
            let logits: Vec<f64> = (0..n).map(|j| (c * s[j] - a1[j]) / tau).collect();
            softmax(&logits)
        })
        .collect()
}

pub fn l_relax(s: &[f64], v: &[f64], m: usize, k: usize, tau: f64) -> f64 {
    let ps = soft_perm(s, tau);
    let pv = soft_perm(v, tau);
    let n = s.len();
    let mut loss = 0.0;
    for j in 0..n {
        let truth: f64 = (0..k).map(|i| pv[i][j]).sum();
        let model: f64 = (0..m).map(|i| ps[i][j]).sum::<f64>() / m as f64;
        loss -= truth * model.max(1e-30).ln();
    }
    loss
}

pub fn l_global(s: &[f64], v: &[f64], tau: f64) -> f64 {
    let ps = soft_perm(s, tau);
    let pv = soft_perm(v, tau);
    let mut loss = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            loss -= pv[i][j] * ps[i][j].max(1e-30).ln();
        }
    }
    loss
}
