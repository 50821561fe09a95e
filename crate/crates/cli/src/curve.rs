//! Plot-ready samples of a fitted scaling law and its revenue forecast.

use adscale::bnsl::{bnsl_eval, BnslParams};
use adscale::metrics::{apply_revenue_map, RevenueMap};
use adscale::numeric::log_space;
use adscale::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub flops: f64,
    pub r_over_rstar: f64,
    pub revenue: f64,
}

/// `n` log-spaced rows over `[lo, hi]`; the first and last rows sit exactly
/// on the endpoints.
pub fn emit_curve_samples(
    p: &BnslParams,
    g: &RevenueMap,
    (lo, hi): (f64, f64),
    n: usize,
) -> Result<Vec<CurveRow>> {
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
        return Err(Error::InvalidInput(format!(
            "flops range must satisfy 0 < lo < hi, got [{lo}, {hi}]"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    log_space(lo, hi, n)
        .into_iter()
        .map(|flops| {
            let r = bnsl_eval(p, flops)?;
            Ok(CurveRow {
                flops,
                r_over_rstar: r,
                revenue: apply_revenue_map(g, r),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows_are_the_endpoints() {
        let p = BnslParams::power_law(0.9, -2.0, 0.1);
        let g = RevenueMap::linear(10.0, 1.0);
        let rows = emit_curve_samples(&p, &g, (1e6, 1e8), 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].flops, 1e6);
        assert_eq!(rows[1].flops, 1e8);
        assert_eq!(rows[0].r_over_rstar, bnsl_eval(&p, 1e6).unwrap());
    }

    #[test]
    fn flat_law_gives_constant_column() {
        let p = BnslParams::power_law(0.7, 0.0, 0.3);
        let rows = emit_curve_samples(&p, &RevenueMap::linear(2.0, 0.0), (1.0, 1e9), 25).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.r_over_rstar == 0.7 && r.revenue == 1.4));
    }

    #[test]
    fn bad_ranges_are_rejected() {
        let p = BnslParams::power_law(0.7, 0.0, 0.3);
        let g = RevenueMap::linear(1.0, 0.0);
        assert!(emit_curve_samples(&p, &g, (10.0, 1.0), 5).is_err());
        assert!(emit_curve_samples(&p, &g, (0.0, 1.0), 5).is_err());
        assert!(emit_curve_samples(&p, &g, (1.0, 10.0), 1).is_err());
    }
}
