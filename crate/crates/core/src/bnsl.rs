//! Broken neural scaling law: a smoothly broken power law relating compute
//! (FLOPs per user-ad pair) to R/R*.
//!
//! ```text
//! y(x) = a + b * x^(-c0) * prod_i (1 + (x / d_i)^(1 / f_i))^(-c_i * f_i)
//! ```
//!
//! Fitting happens in normalized coordinates: with `x_ref` the geometric
//! mean of the observed FLOPs and `u = ln(x / x_ref)`, the optimizer works on
//! `[a, b_ref, c0, (c_i, ln(d_i / x_ref), ln f_i)...]` where
//! `b_ref = b * x_ref^(-c0)`. All coordinates are then O(1), which keeps the
//! simplex well conditioned over several decades of FLOPs. Break sharpness
//! `f_i` is kept positive while fitting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::ScalingObservation;
use crate::flopscalc::{flops_per_pair, ModelSpec};
use crate::metrics::RevenueMap;
use crate::numeric::{log_space, mean, pairwise_sum};
use crate::optim::{basin_hopping, BasinHoppingOptions, NelderMeadOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Break {
    pub c: f64,
    pub d: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BnslRepr", into = "BnslRepr")]
pub struct BnslParams {
    pub a: f64,
    pub b: f64,
    pub c0: f64,
    pub breaks: Vec<Break>,
}

#[derive(Serialize, Deserialize)]
struct BnslRepr {
    a: f64,
    b: f64,
    c0: f64,
    breaks: Vec<Break>,
    /// Optional on input; checked against the break count when present.
    #[serde(default)]
    t: Option<usize>,
}

impl TryFrom<BnslRepr> for BnslParams {
    type Error = Error;

    fn try_from(r: BnslRepr) -> Result<Self> {
        if r.t.is_some_and(|t| t != r.breaks.len()) {
            return Err(Error::InvalidInput(format!(
                "t = {} but {} breaks given",
                r.t.unwrap_or_default(),
                r.breaks.len()
            )));
        }
        let p = BnslParams {
            a: r.a,
            b: r.b,
            c0: r.c0,
            breaks: r.breaks,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<BnslParams> for BnslRepr {
    fn from(p: BnslParams) -> Self {
        BnslRepr {
            t: Some(p.breaks.len()),
            a: p.a,
            b: p.b,
            c0: p.c0,
            breaks: p.breaks,
        }
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl BnslParams {
    pub fn power_law(a: f64, b: f64, c0: f64) -> Self {
        Self {
            a,
            b,
            c0,
            breaks: Vec::new(),
        }
    }

    pub fn t(&self) -> usize {
        self.breaks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.b, self.c0]
            .iter()
            .copied()
            .chain(self.breaks.iter().flat_map(|b| [b.c, b.d, b.f]))
            .all(f64::is_finite);
        if !finite {
            return Err(Error::InvalidInput(
                "non-finite scaling-law parameter".into(),
            ));
        }
        for (i, br) in self.breaks.iter().enumerate() {
            if br.d <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "break {i}: d must be positive"
                )));
            }
            if br.f == 0.0 {
                return Err(Error::InvalidInput(format!("break {i}: f must be nonzero")));
            }
        }
        Ok(())
    }

    /// Evaluates the law at `flops` without checking the domain.
    pub fn eval_unchecked(&self, flops: f64) -> f64 {
        let ln_x = flops.ln();
        let mut log_shape = -self.c0 * ln_x;
        for br in &self.breaks {
            // (1 + (x/d)^(1/f))^(-c f) = exp(-c f softplus((ln x - ln d) / f))
            log_shape -= br.c * br.f * softplus((ln_x - br.d.ln()) / br.f);
        }
        self.a + self.b * log_shape.exp()
    }
}

pub fn bnsl_eval(p: &BnslParams, flops: f64) -> Result<f64> {
    if !(flops.is_finite() && flops > 0.0) {
        return Err(Error::InvalidInput(format!(
            "flops must be positive, got {flops}"
        )));
    }
    p.validate()?;
    let y = p.eval_unchecked(flops);
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::Numeric(format!(
            "scaling law overflowed at flops={flops}"
        )))
    }
}

/// Residual space of the fit objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSpace {
    #[default]
    Linear,
    /// Residuals of `ln y`; needs strictly positive observations.
    Log,
}

/// Box constraints in normalized coordinates (see the module docs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub a: (f64, f64),
    /// Amplitude of the power-law term at the reference FLOPs.
    pub b_ref: (f64, f64),
    pub c0: (f64, f64),
    pub c: (f64, f64),
    pub f: (f64, f64),
    /// How far (in natural-log FLOPs) a break may sit outside the observed
    /// range.
    pub break_margin: f64,
}

impl Default for FitBounds {
    fn default() -> Self {
        Self {
            a: (-10.0, 10.0),
            b_ref: (-100.0, 100.0),
            c0: (-5.0, 5.0),
            c: (-10.0, 10.0),
            f: (0.01, 20.0),
            break_margin: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub t: usize,
    pub n_hops: usize,
    pub step_scale: f64,
    pub local_tol: f64,
    pub temperature: f64,
    pub max_local_evals: usize,
    pub seed: u64,
    pub bounds: FitBounds,
    pub space: FitSpace,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            t: 6,
            n_hops: 200,
            step_scale: 0.5,
            local_tol: 1e-14,
            temperature: 1.0,
            max_local_evals: 4000,
            seed: 0,
            bounds: FitBounds::default(),
            space: FitSpace::Linear,
        }
    }
}

impl FitConfig {
    pub fn with_t(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_hops == 0 {
            return Err(Error::Config("n_hops must be at least 1".into()));
        }
        if !(self.step_scale > 0.0 && self.local_tol > 0.0 && self.temperature >= 0.0) {
            return Err(Error::Config(
                "step_scale and local_tol must be positive, temperature non-negative".into(),
            ));
        }
        let b = &self.bounds;
        for (name, (lo, hi)) in [
            ("a", b.a),
            ("b_ref", b.b_ref),
            ("c0", b.c0),
            ("c", b.c),
            ("f", b.f),
        ] {
            if !(lo < hi) {
                return Err(Error::Config(format!("empty bound interval for {name}")));
            }
        }
        if !(b.f.0 > 0.0) {
            return Err(Error::Config("lower bound of f must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: BnslParams,
    pub sse: f64,
    /// `None` when the observations have zero variance.
    pub r_squared: Option<f64>,
    pub degenerate_variance: bool,
    pub n_restarts_improved: usize,
    pub converged: bool,
    /// The fitted curve decreases somewhere over the observed range.
    pub non_monotone: bool,
    pub n_points: usize,
    pub evals: usize,
}

struct Problem {
    u: Vec<f64>,
    y: Vec<f64>,
    x_ref: f64,
    t: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    space: FitSpace,
}

impl Problem {
    fn predict(&self, theta: &[f64], u: f64) -> f64 {
        let mut log_shape = -theta[2] * u;
        for br in theta[3..].chunks_exact(3) {
            let f = br[2].exp();
            log_shape -= br[0] * f * softplus((u - br[1]) / f);
        }
        theta[0] + theta[1] * log_shape.exp()
    }

    fn sse(&self, theta: &[f64]) -> f64 {
        if theta
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .any(|(x, (lo, hi))| !(lo <= x && x <= hi))
        {
            return f64::INFINITY;
        }
        let mut total = 0.0;
        for (&u, &y) in self.u.iter().zip(&self.y) {
            let p = self.predict(theta, u);
            let r = match self.space {
                FitSpace::Linear => y - p,
                FitSpace::Log => {
                    if p <= 0.0 {
                        return f64::INFINITY;
                    }
                    y.ln() - p.ln()
                }
            };
            total += r * r;
        }
        if total.is_finite() {
            total
        } else {
            f64::INFINITY
        }
    }

    fn project(&self, theta: &mut [f64]) {
        for (x, (lo, hi)) in theta.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *x = x.clamp(*lo, *hi);
        }
    }

    fn to_params(&self, theta: &[f64]) -> BnslParams {
        let c0 = theta[2];
        BnslParams {
            a: theta[0],
            b: theta[1] * self.x_ref.powf(c0),
            c0,
            breaks: theta[3..]
                .chunks_exact(3)
                .map(|br| Break {
                    c: br[0],
                    d: self.x_ref * br[1].exp(),
                    f: br[2].exp(),
                })
                .collect(),
        }
    }
}

/// Starting point: `a` at the extreme observation the curve approaches, `b`
/// and `c0` from a two-point power law through the gap `|a - y|`, breaks
/// with zero strength spread log-uniformly over the FLOPs range.
fn initial_theta(p: &Problem) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..p.u.len()).collect();
    idx.sort_by(|&i, &j| p.u[i].total_cmp(&p.u[j]));
    let (first, last) = (idx[0], idx[idx.len() - 1]);
    let increasing = p.y[last] >= p.y[first];
    let a = if increasing {
        p.y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        p.y.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let gap = |i: usize| (a - p.y[i]).abs();

    let mut b_ref = 0.0;
    let mut c0 = 0.1;
    // the far point is the largest-FLOPs observation still away from `a`
    if let Some(&far) = idx
        .iter()
        .rev()
        .find(|&&i| gap(i) > 0.0 && p.u[i] > p.u[first])
    {
        if gap(first) > 0.0 {
            c0 = (gap(first) / gap(far)).ln() / (p.u[far] - p.u[first]);
            let amp = gap(first) * (c0 * p.u[first]).exp();
            b_ref = if increasing { -amp } else { amp };
        }
    }

    let (u_min, u_max) = (p.u[first], p.u[last]);
    let mut theta = vec![a, b_ref, c0];
    for i in 0..p.t {
        let pos = u_min + (u_max - u_min) * (i + 1) as f64 / (p.t + 1) as f64;
        theta.extend([0.0, pos, 0.0]);
    }
    p.project(&mut theta);
    theta
}

pub fn min_points(t: usize) -> usize {
    if t == 0 {
        4
    } else {
        8
    }
}

pub fn fit_bnsl(obs: &[ScalingObservation], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if obs
        .iter()
        .any(|o| !o.flops.is_finite() || o.flops <= 0.0 || !o.r_over_rstar.is_finite())
    {
        return Err(Error::InvalidInput(
            "observations must have finite values and positive flops".into(),
        ));
    }
    if cfg.space == FitSpace::Log && obs.iter().any(|o| o.r_over_rstar <= 0.0) {
        return Err(Error::InvalidInput(
            "log-space fit needs positive observations".into(),
        ));
    }
    let mut distinct: Vec<f64> = obs.iter().map(|o| o.flops).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() == 1 && obs.len() > 1 {
        return Err(Error::InvalidInput(
            "all observations share the same flops".into(),
        ));
    }
    let needed = min_points(cfg.t);
    if distinct.len() < needed {
        return Err(Error::InvalidInput(format!(
            "need at least {needed} distinct flops values for t={}, got {}",
            cfg.t,
            distinct.len()
        )));
    }
    let n_params = 3 + 3 * cfg.t;
    if obs.len() < n_params {
        log::warn!(
            "{} observations for {n_params} parameters; the fit is underdetermined",
            obs.len()
        );
    }

    let ln_x: Vec<f64> = obs.iter().map(|o| o.flops.ln()).collect();
    let ln_ref = mean(&ln_x).unwrap();
    let u: Vec<f64> = ln_x.iter().map(|l| l - ln_ref).collect();
    let (u_min, u_max) = (
        distinct[0].ln() - ln_ref,
        distinct[distinct.len() - 1].ln() - ln_ref,
    );

    let b = &cfg.bounds;
    let mut lo = vec![b.a.0, b.b_ref.0, b.c0.0];
    let mut hi = vec![b.a.1, b.b_ref.1, b.c0.1];
    for _ in 0..cfg.t {
        lo.extend([b.c.0, u_min - b.break_margin, b.f.0.ln()]);
        hi.extend([b.c.1, u_max + b.break_margin, b.f.1.ln()]);
    }
    let problem = Problem {
        u,
        y: obs.iter().map(|o| o.r_over_rstar).collect(),
        x_ref: ln_ref.exp(),
        t: cfg.t,
        lo,
        hi,
        space: cfg.space,
    };

    let theta0 = initial_theta(&problem);
    let opts = BasinHoppingOptions {
        n_hops: cfg.n_hops,
        step_scale: cfg.step_scale,
        temperature: cfg.temperature,
        seed: cfg.seed,
        local: NelderMeadOptions {
            ftol: cfg.local_tol,
            xtol: cfg.local_tol.sqrt(),
            max_evals: cfg.max_local_evals,
        },
        polish_restarts: 10,
    };
    let best = basin_hopping(
        |th| problem.sse(th),
        &theta0,
        |th| problem.project(th),
        &opts,
    );
    let params = problem.to_params(&best.x);

    let residuals: Vec<f64> = obs
        .iter()
        .map(|o| {
            let r = o.r_over_rstar - params.eval_unchecked(o.flops);
            r * r
        })
        .collect();
    let sse = pairwise_sum(&residuals);
    let y_bar = mean(&problem.y).unwrap();
    let ss_tot = pairwise_sum(
        &problem
            .y
            .iter()
            .map(|y| (y - y_bar).powi(2))
            .collect::<Vec<_>>(),
    );
    let degenerate_variance = problem.y.iter().all(|&y| y == problem.y[0]) || ss_tot == 0.0;
    let r_squared = (!degenerate_variance).then(|| 1.0 - sse / ss_tot);

    let grid = log_space(distinct[0], distinct[distinct.len() - 1], 100);
    let curve: Vec<f64> = grid.iter().map(|&x| params.eval_unchecked(x)).collect();
    let non_monotone = curve.windows(2).any(|w| w[1] < w[0] - 1e-12);
    if non_monotone {
        log::warn!("fitted scaling law is not non-decreasing over the observed range");
    }

    Ok(FitResult {
        params,
        sse,
        r_squared,
        degenerate_variance,
        n_restarts_improved: best.improvements,
        converged: best.converged,
        non_monotone,
        n_points: obs.len(),
        evals: best.evals,
    })
}

/// Revenue forecast of a model: revenue map applied to the scaling law at
/// the model's per-pair FLOPs.
pub fn predict_revenue(spec: &ModelSpec, p: &BnslParams, g: &RevenueMap) -> Result<f64> {
    let flops = flops_per_pair(spec)? as f64;
    Ok(g.apply(bnsl_eval(p, flops)?))
}

/// Noisy samples of a known law, for fixtures and demos: multiplicative
/// Gaussian noise of relative size `rel_noise`.
pub fn sample_law(
    p: &BnslParams,
    flops: &[f64],
    rel_noise: f64,
    seed: u64,
) -> Result<Vec<ScalingObservation>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    flops
        .iter()
        .map(|&x| {
            let y = bnsl_eval(p, x)?;
            let z: f64 = rng.sample(StandardNormal);
            Ok(ScalingObservation {
                flops: x,
                r_over_rstar: y * (1.0 + rel_noise * z),
                label: format!("flops={x}"),
            })
        })
        .collect()
}
