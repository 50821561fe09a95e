mod common;

use adscale::domain::Impression;
use adscale::metrics::{
    fit_revenue_map, hard_permutation, ndcg_impression, opa_impression, r_over_rstar_impression,
    recall_impression, MetricConfig,
};
use common::oracles;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut ChaCha8Rng) -> (Impression, MetricConfig) {
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=n.min(3));
    let k = rng.random_range(1..=n);
    let monotone = rng.random_bool(0.5);
    (
        oracles::random_impression(rng, n, monotone),
        MetricConfig::new(m).with_k(k),
    )
}

#[test]
fn metrics_equal_brute_force_on_random_slates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (imp, cfg) = random_case(&mut rng);
        let (m, k) = (cfg.m, cfg.cutoff());
        assert_eq!(
            r_over_rstar_impression(&imp, &cfg).unwrap(),
            oracles::r_over_rstar(&imp, m),
            "{imp:?}"
        );
        assert_eq!(
            ndcg_impression(&imp, &cfg).unwrap(),
            oracles::ndcg(&imp, k),
            "{imp:?}"
        );
        assert_eq!(
            recall_impression(&imp, &cfg).unwrap().unwrap().to_bits(),
            oracles::recall(&imp, m, k).to_bits()
        );
        let got = opa_impression(&imp).unwrap();
        assert_eq!(got.map(f64::to_bits), oracles::opa(&imp).map(f64::to_bits));
    }
}

#[test]
fn hard_permutation_matches_insertion_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let n = rng.random_range(1..=12);
        let keys: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        assert_eq!(hard_permutation(&keys).unwrap(), oracles::ranking(&keys));
    }
}

#[test]
fn ratio_is_invariant_to_ecpm_scale_and_score_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (imp, cfg) = random_case(&mut rng);
        let base = r_over_rstar_impression(&imp, &cfg).unwrap();
        let c = rng.random_range(0.01..100.0);
        let mut scaled = imp.clone();
        scaled.ads.iter_mut().for_each(|a| a.ecpm *= c);
        let after = r_over_rstar_impression(&scaled, &cfg).unwrap();
        match (base, after) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }

        // strictly increasing transform of the scores
        let mut warped = imp.clone();
        warped
            .ads
            .iter_mut()
            .for_each(|a| a.score = a.score.map(|s| (3.0 * s).exp() - 7.0));
        assert_eq!(r_over_rstar_impression(&warped, &cfg).unwrap(), base);
        assert_eq!(
            ndcg_impression(&warped, &cfg).unwrap(),
            ndcg_impression(&imp, &cfg).unwrap()
        );
        assert_eq!(
            recall_impression(&warped, &cfg).unwrap(),
            recall_impression(&imp, &cfg).unwrap()
        );
        assert_eq!(
            opa_impression(&warped).unwrap(),
            opa_impression(&imp).unwrap()
        );
    }
}

#[test]
fn constant_ecpm_gives_exactly_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let (mut imp, cfg) = random_case(&mut rng);
        let c = rng.random_range(0.1..50.0);
        imp.ads.iter_mut().for_each(|a| a.ecpm = c);
        assert_eq!(r_over_rstar_impression(&imp, &cfg).unwrap(), Some(1.0));
    }
}

#[test]
fn ratio_lies_in_unit_interval_when_ecpm_follows_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let imp = oracles::random_impression(&mut rng, n, true);
        let cfg = MetricConfig::new(rng.random_range(1..=n));
        if let Some(r) = r_over_rstar_impression(&imp, &cfg).unwrap() {
            assert!((0.0..=1.0).contains(&r), "{r}");
        }
    }
}

proptest! {
    #[test]
    fn revenue_map_recovers_noiseless_lines(
        slope in -1e3f64..1e3,
        intercept in -1e3f64..1e3,
        xs in prop::collection::btree_set(0u32..10_000, 2..40),
    ) {
        prop_assume!(slope.abs() > 1e-3);
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .map(|&x| {
                let x = x as f64 / 10_000.0;
                (x, slope * x + intercept)
            })
            .collect();
        let g = fit_revenue_map(&pts).unwrap();
        let scale = slope.abs().max(intercept.abs());
        prop_assert!((g.slope - slope).abs() <= 1e-9 * slope.abs().max(1e-9) * 1e3);
        prop_assert!((g.intercept - intercept).abs() <= 1e-9 * scale * 1e3);
        prop_assert!((g.r_squared - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn revenue_map_recovers_well_spread_line_to_1e9() {
    let pts: Vec<(f64, f64)> = (0..20)
        .map(|i| {
            let x = 0.3 + 0.02 * i as f64;
            (x, 123.456 * x - 7.25)
        })
        .collect();
    let g = fit_revenue_map(&pts).unwrap();
    assert!((g.slope - 123.456).abs() / 123.456 <= 1e-9);
    assert!((g.intercept + 7.25).abs() / 7.25 <= 1e-9);
    assert!((g.r_squared - 1.0).abs() <= 1e-12);
}
