//! Small numeric helpers shared across modules.

/// Pairwise (cascade) summation in a fixed order.
///
/// The result depends only on the slice contents, never on how the values
/// were produced, so parallel producers that collect in order reduce to
/// bit-identical sums.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        return values.iter().fold(0.0, |acc, v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(pairwise_sum(values) / values.len() as f64)
    }
}

/// `n` log-spaced points over `[lo, hi]` with exact endpoints.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (llo, lhi) = (lo.ln(), hi.ln());
            let last = n - 1;
            (0..n)
                .map(|i| match i {
                    0 => lo,
                    i if i == last => hi,
                    i => (llo + (lhi - llo) * i as f64 / last as f64).exp(),
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v = [1.0, 2.0, 3.5];
        assert_eq!(pairwise_sum(&v), 6.5);
        assert_eq!(mean(&v), Some(6.5 / 3.0));
        assert_eq!(mean(&[]), None);
    }

    #[test]
    fn pairwise_sum_long_input() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
    }

    #[test]
    fn log_space_endpoints_are_exact() {
        let xs = log_space(3.0, 7e8, 5);
        assert_eq!(xs.len(), 5);
        assert_eq!(xs[0], 3.0);
        assert_eq!(xs[4], 7e8);
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }
}
