use std::path::{Path, PathBuf};

use adscale::arf::ArfConfig;
use adscale::bnsl::{fit_bnsl, BnslParams, FitConfig, FitSpace};
use adscale::costsim::{
    CostSimConfig, ExecutorConfig, LatencyStat, MachineCostEstimator, Precision,
};
use adscale::domain::{
    generate_impressions, generate_impressions_at, generate_observations, load_dataset,
    metadata_path, read_observations_csv, write_jsonl, write_observations_csv, EcpmDistribution,
    NoiseRule, SynthConfig,
};
use adscale::flopscalc::{serving_flops_per_impression, ModelSpec};
use adscale::metrics::{fit_revenue_map, MetricConfig, NdcgGain, RevenueMap};
use adscale::planner::{
    solve_allocation, solve_roi_constrained, AllocationProblem, GridConstraints, RoiProblem,
    Scenario, SearchSpace,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::artifacts::{csv_bytes, json_bytes, read_json, write_atomic};
use crate::curve::emit_curve_samples;
use crate::error::{CliError, CliResult};
use crate::ops;
use crate::pipeline::{self, flops_grid, read_revenue_points, FlopsRange};

#[derive(Debug, Parser)]
#[command(
    name = "adscale",
    version,
    about = "Scaling-law planning for ad retrieval models"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for every random draw; overrides seeds in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic impressions dataset, or scaling observations.
    Synth(SynthArgs),
    /// R/R*, NDCG, recall and pair accuracy of a scored dataset.
    Metrics(MetricsArgs),
    /// Relaxed ranking losses per impression.
    ArfEval(ArfArgs),
    /// FLOPs breakdown of a model spec.
    Flops(FlopsArgs),
    /// Fit a broken power law to scaling observations.
    FitBnsl(FitBnslArgs),
    /// Fit the linear map from R/R* to revenue.
    FitRevenue(FitRevenueArgs),
    /// Estimate machine counts for a set of model specs.
    SimulateCost(SimulateCostArgs),
    /// Pick the best model under an ROI floor.
    OptimizeRoi(OptimizeRoiArgs),
    /// Split a machine budget across scenarios.
    Allocate(AllocateArgs),
    /// Run a declarative pipeline config.
    Pipeline(PipelineArgs),
    /// Sample a fitted law and its revenue over a FLOPs range.
    EmitCurve(EmitCurveArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON SynthConfig; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_impressions: Option<usize>,
    #[arg(long)]
    pub ads_per_impression: Option<usize>,
    /// Fixed score noise.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Compute budget for capacity-derived noise.
    #[arg(long)]
    pub flops: Option<f64>,
    /// Impressions output (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write scaling observations here instead of a dataset.
    #[arg(long)]
    pub observations: Option<PathBuf>,
    #[arg(long, default_value_t = 1e6)]
    pub flops_lo: f64,
    #[arg(long, default_value_t = 1.5e8)]
    pub flops_hi: f64,
    #[arg(long, default_value_t = 12)]
    pub points: usize,
    /// Exposure slots used to measure R/R* for observations.
    #[arg(long, default_value_t = 5)]
    pub m: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GainArg {
    Linear,
    Exponential,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "linear")]
    pub gain: GainArg,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ReportFormat,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ArfArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpaceArg {
    Linear,
    Log,
}

#[derive(Debug, Args)]
pub struct FitBnslArgs {
    /// observations.csv
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub t: usize,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long, value_enum, default_value = "linear")]
    pub space: SpaceArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Fit diagnostics (SSE, R², flags) as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitRevenueArgs {
    /// CSV with header `r_over_rstar,revenue`.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExecutorArg {
    Synthetic,
    Forward,
}

#[derive(Debug, Args)]
pub struct SimulateCostArgs {
    /// Directory of model spec JSON files.
    #[arg(long)]
    pub specs: PathBuf,
    /// Spec of the model currently in production.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub req0: f64,
    #[arg(long)]
    pub t_limit: f64,
    #[arg(long, value_enum, default_value = "synthetic")]
    pub executor: ExecutorArg,
    /// Fixed latency of the synthetic executor, seconds.
    #[arg(long, default_value_t = 0.0)]
    pub alpha_lat: f64,
    /// Seconds per serving FLOP of the synthetic executor.
    #[arg(long, default_value_t = 1e-11)]
    pub beta_lat: f64,
    #[arg(long, default_value_t = 9)]
    pub measure_iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup_iters: usize,
    #[arg(long)]
    pub batch: Option<u64>,
    #[arg(long)]
    pub p99: bool,
    #[arg(long)]
    pub f64: bool,
    #[arg(long)]
    pub unit_price: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub lanes: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeRoiArgs {
    /// GridConstraints, or a tagged search space (`{"kind": "explicit", "specs": [...]}`).
    #[arg(long)]
    pub grid: PathBuf,
    /// Fitted scaling law (output of fit-bnsl).
    #[arg(long)]
    pub bnsl: PathBuf,
    /// R/R* to revenue map (output of fit-revenue).
    #[arg(long)]
    pub revenue_map: PathBuf,
    /// `{"t_limit", "req0", "base_spec", "unit_price"?, "lanes"?, "executor": {...}}`.
    #[arg(long)]
    pub cost: PathBuf,
    /// Minimum revenue per unit of machine cost.
    #[arg(long)]
    pub lambda: f64,
    /// Optional cap on ceiled machine cost.
    #[arg(long)]
    pub budget: Option<f64>,
    /// Plan JSON, including the full candidate ledger.
    #[arg(long)]
    pub out: PathBuf,
    /// The candidate ledger again as CSV.
    #[arg(long)]
    pub ledger_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// One Scenario JSON per scenario.
    #[arg(long, num_args = 1.., required = true)]
    pub scenarios: Vec<PathBuf>,
    /// Total ceiled machine cost across scenarios.
    #[arg(long)]
    pub budget: f64,
    /// Every chosen model must earn at least this ROI.
    #[arg(long, default_value_t = 1.0)]
    pub roi_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ledger_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Pipeline TOML.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmitCurveArgs {
    #[arg(long)]
    pub bnsl: PathBuf,
    #[arg(long)]
    pub revenue_map: PathBuf,
    #[arg(long)]
    pub lo: f64,
    #[arg(long)]
    pub hi: f64,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Cost file of `optimize-roi`: the machine-cost config plus its executor.
#[derive(Debug, Deserialize)]
struct CostFile {
    #[serde(flatten)]
    cost: CostSimConfig,
    executor: ExecutorConfig,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GridFile {
    Space(SearchSpace),
    Constraints(GridConstraints),
}

struct Ctx {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn write(&self, p: &Path, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.out(p), bytes)
    }

    /// Writes to the file, or stdout without one.
    fn emit(&self, p: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
        match p {
            Some(p) => self.write(p, bytes),
            None => {
                use std::io::Write;
                std::io::stdout()
                    .write_all(bytes)
                    .map_err(|source| CliError::Write {
                        path: PathBuf::from("<stdout>"),
                        source,
                    })
            }
        }
    }
}

/// Log level to use when none was given on the command line.
pub fn default_log_level(cli: &Cli) -> String {
    if let Command::Pipeline(p) = &cli.command {
        if let Ok(text) = std::fs::read_to_string(&p.config) {
            if let Ok(cfg) = pipeline::parse_config(&text, &p.config) {
                if let Some(l) = cfg.log_level {
                    return l;
                }
            }
        }
    }
    "warn".into()
}

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx {
        seed: cli.global.seed,
        out_dir: cli.global.out_dir.clone(),
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Metrics(a) => metrics(&ctx, a),
        Command::ArfEval(a) => {
            let ds = load_dataset(&a.input)?;
            let cfg = ArfConfig {
                tau: a.tau,
                alpha: a.alpha,
                ..ArfConfig::new(a.m, a.k)
            };
            ctx.emit(a.out.as_deref(), &ops::arf_csv(&ds, &cfg)?)
        }
        Command::Flops(a) => {
            let spec: ModelSpec = read_json(&a.spec)?;
            let b = serving_flops_per_impression(&spec)?;
            ctx.emit(a.out.as_deref(), &json_bytes(&b)?)
        }
        Command::FitBnsl(a) => {
            let obs = read_observations_csv(&a.obs)?;
            let mut cfg = FitConfig::default()
                .with_t(a.t)
                .with_seed(ctx.seed.unwrap_or(0));
            if let Some(h) = a.hops {
                cfg.n_hops = h;
            }
            cfg.space = match a.space {
                SpaceArg::Linear => FitSpace::Linear,
                SpaceArg::Log => FitSpace::Log,
            };
            let fit = fit_bnsl(&obs, &cfg)?;
            if fit.non_monotone {
                log::warn!("fitted law is not monotone over the observed range");
            }
            ctx.write(&a.out, &json_bytes(&fit.params)?)?;
            if let Some(r) = &a.report {
                ctx.write(r, &json_bytes(&fit)?)?;
            }
            Ok(())
        }
        Command::FitRevenue(a) => {
            let g = fit_revenue_map(&read_revenue_points(&a.points)?)?;
            ctx.write(&a.out, &json_bytes(&g)?)
        }
        Command::SimulateCost(a) => simulate_cost(&ctx, a),
        Command::OptimizeRoi(a) => {
            let space = match read_json::<GridFile>(&a.grid)? {
                GridFile::Space(s) => s,
                GridFile::Constraints(c) => SearchSpace::Grid(c),
            };
            let cost: CostFile = read_json(&a.cost)?;
            let bnsl: BnslParams = read_json(&a.bnsl)?;
            let g: RevenueMap = read_json(&a.revenue_map)?;
            let plan = solve_roi_constrained(&RoiProblem {
                scenario: Scenario {
                    name: "roi".into(),
                    space,
                    bnsl,
                    g,
                    cost: cost.cost,
                    executor: cost.executor,
                },
                lambda: a.lambda,
                budget: a.budget,
            })?;
            ctx.write(&a.out, &json_bytes(&plan)?)?;
            if let Some(p) = &a.ledger_csv {
                ctx.write(p, &ops::ledger_csv(&plan)?)?;
            }
            Ok(())
        }
        Command::Allocate(a) => {
            let scenarios = a
                .scenarios
                .iter()
                .map(|p| read_json::<Scenario>(p))
                .collect::<CliResult<Vec<_>>>()?;
            let plan = solve_allocation(&AllocationProblem {
                scenarios,
                budget: a.budget,
                roi_floor: a.roi_floor,
            })?;
            ctx.write(&a.out, &json_bytes(&plan)?)?;
            if let Some(p) = &a.ledger_csv {
                ctx.write(p, &ops::ledger_csv(&plan)?)?;
            }
            Ok(())
        }
        Command::Pipeline(a) => {
            let outcome = pipeline::run_pipeline_file(&a.config, ctx.out_dir.as_deref(), ctx.seed)?;
            log::info!(
                "wrote {} artifacts to {}",
                outcome.manifest.artifacts.len(),
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::EmitCurve(a) => {
            let p: BnslParams = read_json(&a.bnsl)?;
            p.validate()?;
            let g: RevenueMap = read_json(&a.revenue_map)?;
            let rows = emit_curve_samples(&p, &g, (a.lo, a.hi), a.n)?;
            ctx.write(&a.out, &csv_bytes(&rows)?)
        }
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<SynthConfig>(p)?,
        None => SynthConfig {
            n_impressions: 1000,
            ads_per_impression: 50,
            ecpm: EcpmDistribution::Lognormal {
                mu: 0.0,
                sigma: 1.0,
            },
            noise: NoiseRule::Fixed { sigma: 0.3 },
            seed: 0,
        },
    };
    if let Some(n) = a.n_impressions {
        cfg.n_impressions = n;
    }
    if let Some(n) = a.ads_per_impression {
        cfg.ads_per_impression = n;
    }
    if let Some(s) = a.sigma {
        cfg.noise = NoiseRule::Fixed { sigma: s };
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(obs_path) = &a.observations {
        let flops = flops_grid(FlopsRange {
            lo: a.flops_lo,
            hi: a.flops_hi,
            n: a.points,
        })?;
        let obs = generate_observations(&cfg, &flops, &MetricConfig::new(a.m))?;
        let mut bytes = Vec::new();
        write_observations_csv(&obs, &mut bytes)?;
        ctx.write(obs_path, &bytes)?;
    }
    if let Some(out) = &a.out {
        let ds = match a.flops {
            Some(f) => generate_impressions_at(&cfg, f)?,
            None => generate_impressions(&cfg)?,
        };
        let mut bytes = Vec::new();
        write_jsonl(&ds, &mut bytes).map_err(|source| CliError::Write {
            path: out.clone(),
            source,
        })?;
        ctx.write(out, &bytes)?;
        if !ds.metadata.is_empty() {
            ctx.write(&metadata_path(out), &json_bytes(&ds.metadata)?)?;
        }
    }
    if a.out.is_none() && a.observations.is_none() {
        return Err(CliError::Config(
            "synth needs --out and/or --observations".into(),
        ));
    }
    Ok(())
}

fn metrics(ctx: &Ctx, a: MetricsArgs) -> CliResult<()> {
    let ds = load_dataset(&a.input)?;
    let cfg = MetricConfig {
        k: a.k,
        ndcg_gain: match a.gain {
            GainArg::Linear => NdcgGain::Linear,
            GainArg::Exponential => NdcgGain::Exponential,
        },
        ..MetricConfig::new(a.m)
    };
    let report = ops::metrics_report(&ds, &cfg)?;
    let bytes = match a.format {
        ReportFormat::Json => json_bytes(&report)?,
        ReportFormat::Csv => ops::metrics_csv(&report.summary)?,
    };
    ctx.emit(a.out.as_deref(), &bytes)
}

fn simulate_cost(ctx: &Ctx, a: SimulateCostArgs) -> CliResult<()> {
    let base: ModelSpec = read_json(&a.base)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.specs)
        .map_err(|source| CliError::Read {
            path: a.specs.clone(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!(
            "no .json spec files in {}",
            a.specs.display()
        )));
    }
    let specs = paths
        .iter()
        .map(|p| read_json::<ModelSpec>(p))
        .collect::<CliResult<Vec<_>>>()?;
    let executor = match a.executor {
        ExecutorArg::Synthetic => ExecutorConfig::synthetic(a.alpha_lat, a.beta_lat),
        ExecutorArg::Forward => ExecutorConfig::ReferenceForward {
            warmup_iters: a.warmup_iters,
            measure_iters: a.measure_iters,
            batch: a.batch,
            precision: if a.f64 {
                Precision::F64
            } else {
                Precision::F32
            },
            stat: if a.p99 {
                LatencyStat::P99
            } else {
                LatencyStat::Median
            },
            seed: ctx.seed.unwrap_or(0),
        },
    };
    let cfg = CostSimConfig {
        t_limit: a.t_limit,
        req0: a.req0,
        base_spec: base,
        unit_price: a.unit_price,
        lanes: a.lanes,
    };
    let mcet = MachineCostEstimator::new(executor, cfg)?;
    let est = mcet.estimate_all(&specs)?;
    let rows: Vec<ops::EstimateRow> = paths
        .iter()
        .zip(&specs)
        .zip(&est)
        .map(|((p, s), e)| ops::EstimateRow::new(p.display().to_string(), s.label(), e))
        .collect();
    ctx.write(&a.out, &json_bytes(&rows)?)?;
    if let Some(c) = &a.csv {
        ctx.write(c, &ops::estimates_csv(&rows)?)?;
    }
    Ok(())
}
