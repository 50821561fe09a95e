//! Derivative-free minimization: Nelder-Mead simplex descent and a
//! basin-hopping driver around it.
//!
//! The simplex uses dimension-adaptive coefficients (Gao & Han, 2012), which
//! behave better than the textbook ones above a handful of parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    /// Stop when the spread of objective values across the simplex is below
    /// this.
    pub ftol: f64,
    /// ...and every vertex is within this distance (max-norm) of the best.
    pub xtol: f64,
    pub max_evals: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            ftol: 1e-12,
            xtol: 1e-6,
            max_evals: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMinimum {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    pub converged: bool,
}

pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> LocalMinimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        let fx = f(x0);
        return LocalMinimum {
            x: Vec::new(),
            fx,
            evals: 1,
            converged: true,
        };
    }
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] = if v[i] != 0.0 { v[i] * 1.05 } else { 0.00025 };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let mut order: Vec<usize> = (0..=n).collect();
    loop {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        order = (0..=n).collect();

        let f_spread = values[n] - values[0];
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (f_spread <= opts.ftol || (values[0] == values[n] && values[0].is_finite()))
            && x_spread <= opts.xtol
        {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / nf;
            }
        }
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(alpha * gamma);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        if fr < values[n] {
            let xc = along(alpha * rho);
            let fc = eval(&xc, &mut evals);
            if fc <= fr {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals);
            if fc < values[n] {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
        }
        // shrink towards the best vertex
        let best = simplex[0].clone();
        for i in 1..=n {
            for (x, b) in simplex[i].iter_mut().zip(&best) {
                *x = b + sigma * (*x - b);
            }
            values[i] = eval(&simplex[i], &mut evals);
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    LocalMinimum {
        x: simplex.swap_remove(best),
        fx: values[best],
        evals,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinHoppingOptions {
    pub n_hops: usize,
    /// Half-width of the uniform perturbation applied to every coordinate.
    pub step_scale: f64,
    /// Metropolis temperature for accepting a hop that does not improve.
    pub temperature: f64,
    pub seed: u64,
    pub local: NelderMeadOptions,
    /// Extra simplex restarts from the final best point.
    pub polish_restarts: usize,
}

impl Default for BasinHoppingOptions {
    fn default() -> Self {
        Self {
            n_hops: 200,
            step_scale: 0.5,
            temperature: 1.0,
            seed: 0,
            local: NelderMeadOptions::default(),
            polish_restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinHoppingResult {
    pub x: Vec<f64>,
    pub fx: f64,
    /// Hops whose local minimum improved on the best value so far.
    pub improvements: usize,
    pub evals: usize,
    /// Whether the local search that produced the best point terminated on
    /// its tolerances.
    pub converged: bool,
}

/// Global minimization by repeated perturb / local-descend / Metropolis-accept
/// cycles. `project` maps a perturbed point back into the feasible box.
pub fn basin_hopping<F, P>(
    mut f: F,
    x0: &[f64],
    project: P,
    opts: &BasinHoppingOptions,
) -> BasinHoppingResult
where
    F: FnMut(&[f64]) -> f64,
    P: Fn(&mut [f64]),
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut evals = 0;

    let start = nelder_mead(&mut f, x0, &opts.local);
    evals += start.evals;
    let mut current = start.clone();
    let mut best = start;
    let mut improvements = 0;

    for _ in 0..opts.n_hops {
        let mut trial = current.x.clone();
        for x in trial.iter_mut() {
            *x += opts.step_scale * rng.random_range(-1.0..=1.0);
        }
        project(&mut trial);
        let local = nelder_mead(&mut f, &trial, &opts.local);
        evals += local.evals;

        if local.fx < best.fx {
            best = local.clone();
            improvements += 1;
        }
        let accept = local.fx <= current.fx || {
            let u: f64 = rng.random();
            opts.temperature > 0.0 && u < (-(local.fx - current.fx) / opts.temperature).exp()
        };
        if accept {
            current = local;
        }
    }

    for _ in 0..opts.polish_restarts {
        let again = nelder_mead(&mut f, &best.x, &opts.local);
        evals += again.evals;
        if again.fx < best.fx {
            let gain = best.fx - again.fx;
            best = again;
            if gain <= opts.local.ftol {
                break;
            }
        } else {
            best.converged |= again.converged;
            break;
        }
    }

    BasinHoppingResult {
        x: best.x,
        fx: best.fx,
        improvements,
        evals,
        converged: best.converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn simplex_finds_rosenbrock_minimum() {
        let opts = NelderMeadOptions {
            ftol: 1e-14,
            xtol: 1e-8,
            max_evals: 10_000,
        };
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &opts);
        assert!(r.converged);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn simplex_one_dimensional() {
        let r = nelder_mead(
            |x| (x[0] - 3.0).powi(2),
            &[0.0],
            &NelderMeadOptions::default(),
        );
        assert!((r.x[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn simplex_respects_eval_budget() {
        let opts = NelderMeadOptions {
            max_evals: 30,
            ..Default::default()
        };
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &opts);
        assert!(!r.converged);
        assert!(r.evals <= 30 + 3);
    }

    #[test]
    fn basin_hopping_escapes_local_minimum() {
        // double well with the deeper basin at x = +2
        let f = |x: &[f64]| (x[0] * x[0] - 4.0).powi(2) - 2.0 * x[0];
        let opts = BasinHoppingOptions {
            n_hops: 50,
            step_scale: 2.0,
            seed: 3,
            ..Default::default()
        };
        let r = basin_hopping(f, &[-2.0], |_| {}, &opts);
        assert!(r.x[0] > 1.5, "{:?}", r.x);
        let again = basin_hopping(f, &[-2.0], |_| {}, &opts);
        assert_eq!(r, again);
    }
}
