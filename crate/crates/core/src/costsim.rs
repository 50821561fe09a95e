//! Machine-count estimation by simulated serving.
//!
//! Each model's per-machine throughput is measured under a response-time
//! limit, and the fleet needed to carry the base model's traffic follows from
//! the base model's known machine count:
//!
//! ```text
//! QPS_total = req0 * QPS_0
//! req_i     = QPS_total / QPS_i
//! ```
//!
//! Two executors produce latencies. `SyntheticLatency` is a closed-form
//! affine model of serving FLOPs. `ReferenceForward` times a real dense
//! forward pass over random weights with the model's serving layout; its
//! timings track FLOPs but are not calibrated to any particular fleet.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flopscalc::{serving_flops_per_impression, ModelKind, ModelSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// How repeated latency samples collapse to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyStat {
    #[default]
    Median,
    P99,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecutorConfig {
    /// `latency = alpha_lat + beta_lat * serving_flops`.
    SyntheticLatency { alpha_lat: f64, beta_lat: f64 },
    ReferenceForward {
        #[serde(default = "default_warmup")]
        warmup_iters: usize,
        #[serde(default = "default_measure")]
        measure_iters: usize,
        /// Candidates per request; `None` uses the spec's `ads_per_request`.
        #[serde(default)]
        batch: Option<u64>,
        #[serde(default)]
        precision: Precision,
        #[serde(default)]
        stat: LatencyStat,
        #[serde(default)]
        seed: u64,
    },
}

fn default_warmup() -> usize {
    2
}
fn default_measure() -> usize {
    9
}

impl ExecutorConfig {
    pub fn synthetic(alpha_lat: f64, beta_lat: f64) -> Self {
        Self::SyntheticLatency {
            alpha_lat,
            beta_lat,
        }
    }

    pub fn reference(batch: Option<u64>, seed: u64) -> Self {
        Self::ReferenceForward {
            warmup_iters: default_warmup(),
            measure_iters: default_measure(),
            batch,
            precision: Precision::F32,
            stat: LatencyStat::Median,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::SyntheticLatency {
                alpha_lat,
                beta_lat,
            } => {
                if !(alpha_lat.is_finite()
                    && beta_lat.is_finite()
                    && alpha_lat >= 0.0
                    && beta_lat >= 0.0)
                {
                    return Err(Error::Config(
                        "alpha_lat and beta_lat must be finite and non-negative".into(),
                    ));
                }
            }
            Self::ReferenceForward {
                measure_iters,
                batch,
                ..
            } => {
                if measure_iters == 0 {
                    return Err(Error::Config("measure_iters must be at least 1".into()));
                }
                if batch == Some(0) {
                    return Err(Error::Config("batch must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, Self::SyntheticLatency { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSimConfig {
    /// Response-time limit in seconds.
    pub t_limit: f64,
    /// Machines currently serving the base model.
    pub req0: f64,
    pub base_spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_price: Option<f64>,
    #[serde(default = "default_lanes")]
    pub lanes: u32,
}

fn default_lanes() -> u32 {
    1
}

impl CostSimConfig {
    pub fn new(base_spec: ModelSpec, req0: f64, t_limit: f64) -> Self {
        Self {
            t_limit,
            req0,
            base_spec,
            unit_price: None,
            lanes: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_limit.is_finite() && self.t_limit > 0.0) {
            return Err(Error::Config("t_limit must be positive".into()));
        }
        if !(self.req0.is_finite() && self.req0 > 0.0) {
            return Err(Error::Config("req0 must be positive".into()));
        }
        if self.lanes == 0 {
            return Err(Error::Config("lanes must be at least 1".into()));
        }
        if let Some(p) = self.unit_price {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::Config("unit_price must be positive".into()));
            }
        }
        self.base_spec.validate()
    }
}

/// Source of time for latency measurement.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

/// Monotonic wall clock.
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Deterministic clock that advances by a fixed tick on every reading.
pub struct TickClock {
    tick_nanos: u64,
    ticks: AtomicU64,
}

impl TickClock {
    pub fn new(tick: Duration) -> Self {
        Self {
            tick_nanos: tick.as_nanos() as u64,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Clock for TickClock {
    fn now(&self) -> Duration {
        let n = self.ticks.fetch_add(1, Ordering::SeqCst);
        Duration::from_nanos(n * self.tick_nanos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpsMeasurement {
    /// Seconds per request.
    pub latency: f64,
    pub qps: f64,
    pub feasible: bool,
}

pub fn measure_qps(
    spec: &ModelSpec,
    exec: &ExecutorConfig,
    cfg: &CostSimConfig,
) -> Result<QpsMeasurement> {
    measure_qps_with_clock(spec, exec, cfg, &WallClock::new())
}

pub fn measure_qps_with_clock(
    spec: &ModelSpec,
    exec: &ExecutorConfig,
    cfg: &CostSimConfig,
    clock: &dyn Clock,
) -> Result<QpsMeasurement> {
    exec.validate()?;
    cfg.validate()?;
    let latency = match *exec {
        ExecutorConfig::SyntheticLatency {
            alpha_lat,
            beta_lat,
        } => {
            let flops = serving_flops_per_impression(spec)?.per_impression_serving;
            alpha_lat + beta_lat * flops as f64
        }
        ExecutorConfig::ReferenceForward {
            warmup_iters,
            measure_iters,
            batch,
            precision,
            stat,
            seed,
        } => {
            spec.validate()?;
            let batch = batch.unwrap_or(spec.serving.ads_per_request) as usize;
            let samples = match precision {
                Precision::F32 => ReferenceNet::<f32>::new(spec, batch, seed).time(
                    warmup_iters,
                    measure_iters,
                    clock,
                ),
                Precision::F64 => ReferenceNet::<f64>::new(spec, batch, seed).time(
                    warmup_iters,
                    measure_iters,
                    clock,
                ),
            };
            summarize_latency(samples, stat)
        }
    };
    if !latency.is_finite() || latency < 0.0 {
        return Err(Error::Numeric(format!("invalid latency {latency}")));
    }
    if latency == 0.0 {
        return Err(Error::Numeric(
            "zero latency gives unbounded throughput; check the executor configuration".into(),
        ));
    }
    let feasible = latency <= cfg.t_limit;
    Ok(QpsMeasurement {
        latency,
        qps: if feasible {
            cfg.lanes as f64 / latency
        } else {
            0.0
        },
        feasible,
    })
}

fn summarize_latency(mut samples: Vec<f64>, stat: LatencyStat) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    match stat {
        LatencyStat::Median if n % 2 == 1 => samples[n / 2],
        LatencyStat::Median => 0.5 * (samples[n / 2 - 1] + samples[n / 2]),
        LatencyStat::P99 => {
            let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
            samples[rank - 1]
        }
    }
}

trait Scalar: Float + Send + Sync {}

impl<T: Float + Send + Sync> Scalar for T {}

struct Dense<T> {
    inputs: usize,
    outputs: usize,
    // row-major [outputs][inputs]
    weights: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| cast::<T>(rng.random_range(-scale..scale)))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
        }
    }

    fn forward_into(&self, x: &[T], out: &mut [T], relu: bool) {
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs)) {
            let mut acc = T::zero();
            for (w, xi) in row.iter().zip(x) {
                acc = acc + *w * *xi;
            }
            *o = if relu && acc < T::zero() {
                T::zero()
            } else {
                acc
            };
        }
    }
}

fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).unwrap()
}

fn random_vec<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n)
        .map(|_| cast::<T>(rng.random_range(-1.0..1.0)))
        .collect()
}

fn stack<T: Scalar>(dims: &[u64], rng: &mut ChaCha8Rng) -> Vec<Dense<T>> {
    dims.windows(2)
        .map(|w| Dense::random(w[0] as usize, w[1] as usize, rng))
        .collect()
}

fn run_stack<T: Scalar>(layers: &[Dense<T>], input: &[T]) -> Vec<T> {
    let mut cur = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let mut next = vec![T::zero(); layer.outputs];
        layer.forward_into(&cur, &mut next, i + 1 < layers.len());
        cur = next;
    }
    cur
}

/// Dense network laid out the way the spec is served.
enum ReferenceNet<T> {
    /// Every candidate runs the full MLP on `[user, ad]`.
    Naive {
        layers: Vec<Dense<T>>,
        user: Vec<T>,
        ads: Vec<Vec<T>>,
    },
    /// User half of the first layer runs once; the ad half comes from a
    /// cache filled before timing starts.
    FirstLayerOpt {
        user_first: Dense<T>,
        upper: Vec<Dense<T>>,
        user: Vec<T>,
        cached_ads: Vec<Vec<T>>,
    },
    /// User tower once, then one inner product per cached ad embedding.
    TwinTower {
        user_tower: Vec<Dense<T>>,
        user: Vec<T>,
        cached_ads: Vec<Vec<T>>,
    },
}

impl<T: Scalar> ReferenceNet<T> {
    fn new(spec: &ModelSpec, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match spec.kind {
            ModelKind::Mlp if spec.serving.first_layer_opt => {
                let a1 = spec.layers[1] as usize;
                let user_first = Dense::random(spec.user_dim as usize, a1, &mut rng);
                let ad_first = Dense::<T>::random(spec.ad_dim as usize, a1, &mut rng);
                let upper = stack(&spec.layers[1..], &mut rng);
                let user = random_vec(spec.user_dim as usize, &mut rng);
                let cached_ads = (0..batch)
                    .map(|_| {
                        let ad = random_vec(spec.ad_dim as usize, &mut rng);
                        let mut out = vec![T::zero(); a1];
                        ad_first.forward_into(&ad, &mut out, false);
                        out
                    })
                    .collect();
                Self::FirstLayerOpt {
                    user_first,
                    upper,
                    user,
                    cached_ads,
                }
            }
            ModelKind::Mlp => {
                let layers = stack(&spec.layers, &mut rng);
                let user = random_vec(spec.user_dim as usize, &mut rng);
                let ads = (0..batch)
                    .map(|_| random_vec(spec.ad_dim as usize, &mut rng))
                    .collect();
                Self::Naive { layers, user, ads }
            }
            ModelKind::TwinTower => {
                let user_layers = spec.user_layers.as_deref().unwrap();
                let ad_layers = spec.ad_layers.as_deref().unwrap();
                let user_tower = stack(user_layers, &mut rng);
                let ad_tower = stack::<T>(ad_layers, &mut rng);
                let user = random_vec(user_layers[0] as usize, &mut rng);
                let cached_ads = (0..batch)
                    .map(|_| run_stack(&ad_tower, &random_vec(ad_layers[0] as usize, &mut rng)))
                    .collect();
                Self::TwinTower {
                    user_tower,
                    user,
                    cached_ads,
                }
            }
        }
    }

    /// One request; returns a checksum so the work cannot be optimized away.
    fn serve(&self) -> T {
        let mut sink = T::zero();
        match self {
            Self::Naive { layers, user, ads } => {
                let mut input = Vec::with_capacity(layers[0].inputs);
                for ad in ads {
                    input.clear();
                    input.extend_from_slice(user);
                    input.extend_from_slice(ad);
                    sink = sink + run_stack(layers, &input)[0];
                }
            }
            Self::FirstLayerOpt {
                user_first,
                upper,
                user,
                cached_ads,
            } => {
                let mut user_part = vec![T::zero(); user_first.outputs];
                user_first.forward_into(user, &mut user_part, false);
                let mut hidden = vec![T::zero(); user_first.outputs];
                for ad_part in cached_ads {
                    for ((h, u), a) in hidden.iter_mut().zip(&user_part).zip(ad_part) {
                        let s = *u + *a;
                        *h = if s < T::zero() { T::zero() } else { s };
                    }
                    let out = if upper.is_empty() {
                        hidden.clone()
                    } else {
                        run_stack(upper, &hidden)
                    };
                    sink = sink + out[0];
                }
            }
            Self::TwinTower {
                user_tower,
                user,
                cached_ads,
            } => {
                let u = run_stack(user_tower, user);
                for ad in cached_ads {
                    let mut dot = T::zero();
                    for (a, b) in u.iter().zip(ad) {
                        dot = dot + *a * *b;
                    }
                    sink = sink + dot;
                }
            }
        }
        sink
    }

    fn time(&self, warmup: usize, iters: usize, clock: &dyn Clock) -> Vec<f64> {
        for _ in 0..warmup {
            std::hint::black_box(self.serve());
        }
        (0..iters)
            .map(|_| {
                let start = clock.now();
                std::hint::black_box(self.serve());
                (clock.now() - start).as_secs_f64()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineEstimate {
    /// Requests per second per machine; 0 when infeasible.
    pub qps: f64,
    pub latency: f64,
    /// Fractional machine count; `None` when infeasible.
    pub req: Option<f64>,
    pub req_ceiled: Option<u64>,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
}

/// Memoizing machine-cost estimator bound to one base model measurement.
///
/// Estimates are deterministic per spec for the synthetic executor, so
/// concurrent duplicate insertions are harmless.
pub struct MachineCostEstimator {
    exec: ExecutorConfig,
    cfg: CostSimConfig,
    base: QpsMeasurement,
    clock: Box<dyn Clock>,
    memo: Mutex<HashMap<ModelSpec, MachineEstimate>>,
    misses: AtomicU64,
}

impl MachineCostEstimator {
    pub fn new(exec: ExecutorConfig, cfg: CostSimConfig) -> Result<Self> {
        Self::with_clock(exec, cfg, Box::new(WallClock::new()))
    }

    pub fn with_clock(
        exec: ExecutorConfig,
        cfg: CostSimConfig,
        clock: Box<dyn Clock>,
    ) -> Result<Self> {
        let base = measure_qps_with_clock(&cfg.base_spec, &exec, &cfg, clock.as_ref())?;
        if !base.feasible {
            return Err(Error::BaseModelInfeasible {
                latency: base.latency,
                t_limit: cfg.t_limit,
            });
        }
        let est = Self {
            exec,
            cfg,
            base,
            clock,
            memo: Mutex::new(HashMap::new()),
            misses: AtomicU64::new(0),
        };
        let base_estimate = est.estimate_from(base);
        est.memo
            .lock()
            .unwrap()
            .insert(est.cfg.base_spec.clone(), base_estimate);
        Ok(est)
    }

    pub fn base_qps(&self) -> f64 {
        self.base.qps
    }

    pub fn qps_total(&self) -> f64 {
        self.cfg.req0 * self.base.qps
    }

    pub fn config(&self) -> &CostSimConfig {
        &self.cfg
    }

    pub fn executor(&self) -> &ExecutorConfig {
        &self.exec
    }

    /// Number of specs actually measured (memo misses).
    pub fn measurements(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn estimate_from(&self, m: QpsMeasurement) -> MachineEstimate {
        let (req, req_ceiled) = if m.feasible {
            let req = machines_required(self.cfg.req0, self.base.qps, m.qps);
            (Some(req), Some(req.ceil() as u64))
        } else {
            (None, None)
        };
        MachineEstimate {
            qps: m.qps,
            latency: m.latency,
            req,
            req_ceiled,
            feasible: m.feasible,
            cost: req_ceiled
                .zip(self.cfg.unit_price)
                .map(|(n, p)| n as f64 * p),
        }
    }

    pub fn estimate(&self, spec: &ModelSpec) -> Result<MachineEstimate> {
        if let Some(hit) = self.memo.lock().unwrap().get(spec) {
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let m = measure_qps_with_clock(spec, &self.exec, &self.cfg, self.clock.as_ref())?;
        let est = self.estimate_from(m);
        self.memo
            .lock()
            .unwrap()
            .entry(spec.clone())
            .or_insert_with(|| est.clone());
        Ok(est)
    }

    /// Estimates for many specs; synthetic latencies run in parallel, timed
    /// executors run one at a time so measurements never overlap.
    pub fn estimate_all(&self, specs: &[ModelSpec]) -> Result<Vec<MachineEstimate>> {
        if self.exec.is_synthetic() {
            specs.par_iter().map(|s| self.estimate(s)).collect()
        } else {
            specs.iter().map(|s| self.estimate(s)).collect()
        }
    }
}

/// `req0 * QPS_0 / QPS_i`, evaluated as `req0 * (QPS_0 / QPS_i)` so the base
/// model maps back to exactly `req0`.
pub fn machines_required(req0: f64, qps0: f64, qps: f64) -> f64 {
    req0 * (qps0 / qps)
}

pub fn estimate_machines(
    specs: &[ModelSpec],
    exec: &ExecutorConfig,
    cfg: &CostSimConfig,
) -> Result<Vec<MachineEstimate>> {
    MachineCostEstimator::new(exec.clone(), cfg.clone())?.estimate_all(specs)
}
