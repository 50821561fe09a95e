//! Declarative end-to-end runs: a TOML file lists stages that are executed in
//! order, each reading earlier artifacts or external files and writing its
//! own. A `manifest.json` next to the artifacts records what was produced.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use adscale::arf::ArfConfig;
use adscale::bnsl::{fit_bnsl, BnslParams, FitConfig, FitSpace};
use adscale::costsim::{CostSimConfig, ExecutorConfig, MachineCostEstimator};
use adscale::domain::{
    generate_impressions, generate_impressions_at, generate_observations, load_dataset,
    read_observations_csv, write_jsonl, write_observations_csv, EcpmDistribution, NoiseRule,
    SynthConfig,
};
use adscale::flopscalc::ModelSpec;
use adscale::metrics::{fit_revenue_map, MetricConfig, NdcgGain, RevenueMap};
use adscale::numeric::log_space;
use adscale::planner::{
    solve_allocation, solve_roi_constrained, AllocationProblem, RoiProblem, Scenario, SearchSpace,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    csv_bytes, read_bytes, read_json, sha256_hex, write_atomic, ArtifactRecord, ArtifactSet,
};
use crate::curve::emit_curve_samples;
use crate::error::{CliError, CliResult};
use crate::ops;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Artifact directory, relative to the config file.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub log_level: Option<String>,
    #[serde(rename = "stage")]
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Synth(SynthStage),
    Observations(ObservationsStage),
    Metrics(MetricsStage),
    ArfEval(ArfStage),
    FitBnsl(FitBnslStage),
    FitRevenue(FitRevenueStage),
    SimulateCost(SimulateCostStage),
    OptimizeRoi(OptimizeRoiStage),
    Allocate(AllocateStage),
    EmitCurve(EmitCurveStage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthStage {
    pub n_impressions: usize,
    pub ads_per_impression: usize,
    pub ecpm: EcpmDistribution,
    pub noise: NoiseRule,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Compute budget for a capacity-derived noise rule.
    #[serde(default)]
    pub flops: Option<f64>,
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsRange {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationsStage {
    pub n_impressions: usize,
    pub ads_per_impression: usize,
    pub ecpm: EcpmDistribution,
    pub noise: NoiseRule,
    #[serde(default)]
    pub seed: Option<u64>,
    pub flops: FlopsRange,
    pub m: usize,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsStage {
    pub input: String,
    pub m: usize,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub ndcg_gain: NdcgGain,
    pub output: String,
    #[serde(default)]
    pub csv_output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArfStage {
    pub input: String,
    pub m: usize,
    pub k: usize,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    pub output: String,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBnslStage {
    pub input: String,
    pub t: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n_hops: Option<usize>,
    #[serde(default)]
    pub space: FitSpace,
    pub output: String,
    /// Optional fit diagnostics (SSE, R², flags).
    #[serde(default)]
    pub report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRevenueStage {
    /// CSV with header `r_over_rstar,revenue`.
    #[serde(default)]
    pub input: Option<String>,
    /// Inline `[r_over_rstar, revenue]` pairs.
    #[serde(default)]
    pub points: Option<Vec<(f64, f64)>>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateCostStage {
    pub specs: Vec<ModelSpec>,
    pub cost: CostSimConfig,
    pub executor: ExecutorConfig,
    pub output: String,
    #[serde(default)]
    pub csv_output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeRoiStage {
    pub space: SearchSpace,
    pub bnsl: String,
    pub revenue_map: String,
    pub cost: CostSimConfig,
    pub executor: ExecutorConfig,
    pub lambda: f64,
    #[serde(default)]
    pub budget: Option<f64>,
    pub output: String,
    #[serde(default)]
    pub ledger_csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioStage {
    pub name: String,
    pub space: SearchSpace,
    pub bnsl: String,
    pub revenue_map: String,
    pub cost: CostSimConfig,
    pub executor: ExecutorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocateStage {
    pub scenarios: Vec<ScenarioStage>,
    pub budget: f64,
    #[serde(default = "one")]
    pub roi_floor: f64,
    pub output: String,
    #[serde(default)]
    pub ledger_csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitCurveStage {
    pub bnsl: String,
    pub revenue_map: String,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub output: String,
}

impl Stage {
    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Synth(_) => "synth",
            Stage::Observations(_) => "observations",
            Stage::Metrics(_) => "metrics",
            Stage::ArfEval(_) => "arf_eval",
            Stage::FitBnsl(_) => "fit_bnsl",
            Stage::FitRevenue(_) => "fit_revenue",
            Stage::SimulateCost(_) => "simulate_cost",
            Stage::OptimizeRoi(_) => "optimize_roi",
            Stage::Allocate(_) => "allocate",
            Stage::EmitCurve(_) => "emit_curve",
        }
    }

    pub fn inputs(&self) -> Vec<&str> {
        match self {
            Stage::Synth(_) | Stage::Observations(_) | Stage::SimulateCost(_) => vec![],
            Stage::Metrics(s) => vec![&s.input],
            Stage::ArfEval(s) => vec![&s.input],
            Stage::FitBnsl(s) => vec![&s.input],
            Stage::FitRevenue(s) => s.input.as_deref().into_iter().collect(),
            Stage::OptimizeRoi(s) => vec![&s.bnsl, &s.revenue_map],
            Stage::Allocate(s) => s
                .scenarios
                .iter()
                .flat_map(|c| [c.bnsl.as_str(), c.revenue_map.as_str()])
                .collect(),
            Stage::EmitCurve(s) => vec![&s.bnsl, &s.revenue_map],
        }
    }

    pub fn outputs(&self) -> Vec<&str> {
        fn opt(o: &Option<String>) -> Vec<&str> {
            o.as_deref().into_iter().collect()
        }
        let mut out: Vec<&str> = match self {
            Stage::Synth(s) => vec![&s.output],
            Stage::Observations(s) => vec![&s.output],
            Stage::Metrics(s) => [vec![s.output.as_str()], opt(&s.csv_output)].concat(),
            Stage::ArfEval(s) => vec![&s.output],
            Stage::FitBnsl(s) => [vec![s.output.as_str()], opt(&s.report)].concat(),
            Stage::FitRevenue(s) => vec![&s.output],
            Stage::SimulateCost(s) => [vec![s.output.as_str()], opt(&s.csv_output)].concat(),
            Stage::OptimizeRoi(s) => [vec![s.output.as_str()], opt(&s.ledger_csv)].concat(),
            Stage::Allocate(s) => [vec![s.output.as_str()], opt(&s.ledger_csv)].concat(),
            Stage::EmitCurve(s) => vec![&s.output],
        };
        out.dedup();
        out
    }
}

pub fn parse_config(text: &str, path: &Path) -> CliResult<PipelineConfig> {
    toml::from_str(text).map_err(|e| CliError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub kind: String,
    pub outputs: Vec<String>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: usize,
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub status: String,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

struct Run<'a> {
    seed: u64,
    base_dir: &'a Path,
    artifacts: ArtifactSet,
}

impl Run<'_> {
    fn input(&self, rel: &str) -> PathBuf {
        if self.artifacts.contains(rel) {
            self.artifacts.path_of(rel)
        } else {
            self.base_dir.join(rel)
        }
    }

    fn bnsl(&self, rel: &str) -> CliResult<BnslParams> {
        let p: BnslParams = read_json(&self.input(rel))?;
        p.validate()?;
        Ok(p)
    }

    fn revenue_map(&self, rel: &str) -> CliResult<RevenueMap> {
        read_json(&self.input(rel))
    }

    fn execute(&mut self, stage: &Stage) -> CliResult<()> {
        match stage {
            Stage::Synth(s) => {
                let cfg = SynthConfig {
                    n_impressions: s.n_impressions,
                    ads_per_impression: s.ads_per_impression,
                    ecpm: s.ecpm.clone(),
                    noise: s.noise,
                    seed: s.seed.unwrap_or(self.seed),
                };
                let ds = match s.flops {
                    Some(f) => generate_impressions_at(&cfg, f)?,
                    None => generate_impressions(&cfg)?,
                };
                let mut bytes = Vec::new();
                write_jsonl(&ds, &mut bytes).map_err(|e| CliError::Write {
                    path: self.artifacts.path_of(&s.output),
                    source: e,
                })?;
                self.artifacts.write(&s.output, &bytes)?;
                let meta = adscale::domain::metadata_path(Path::new(&s.output));
                self.artifacts
                    .write_json(&meta.to_string_lossy(), &ds.metadata)?;
            }
            Stage::Observations(s) => {
                let cfg = SynthConfig {
                    n_impressions: s.n_impressions,
                    ads_per_impression: s.ads_per_impression,
                    ecpm: s.ecpm.clone(),
                    noise: s.noise,
                    seed: s.seed.unwrap_or(self.seed),
                };
                let flops = flops_grid(s.flops)?;
                let obs = generate_observations(&cfg, &flops, &MetricConfig::new(s.m))?;
                let mut bytes = Vec::new();
                write_observations_csv(&obs, &mut bytes)?;
                self.artifacts.write(&s.output, &bytes)?;
            }
            Stage::Metrics(s) => {
                let ds = load_dataset(self.input(&s.input))?;
                let cfg = MetricConfig {
                    k: s.k,
                    ndcg_gain: s.ndcg_gain,
                    ..MetricConfig::new(s.m)
                };
                let report = ops::metrics_report(&ds, &cfg)?;
                self.artifacts.write_json(&s.output, &report)?;
                if let Some(csv) = &s.csv_output {
                    self.artifacts
                        .write(csv, &ops::metrics_csv(&report.summary)?)?;
                }
            }
            Stage::ArfEval(s) => {
                let ds = load_dataset(self.input(&s.input))?;
                let cfg = ArfConfig {
                    tau: s.tau,
                    alpha: s.alpha,
                    ..ArfConfig::new(s.m, s.k)
                };
                self.artifacts.write(&s.output, &ops::arf_csv(&ds, &cfg)?)?;
            }
            Stage::FitBnsl(s) => {
                let obs = read_observations_csv(self.input(&s.input))?;
                let mut cfg = FitConfig::default()
                    .with_t(s.t)
                    .with_seed(s.seed.unwrap_or(self.seed));
                cfg.space = s.space;
                if let Some(h) = s.n_hops {
                    cfg.n_hops = h;
                }
                let fit = fit_bnsl(&obs, &cfg)?;
                self.artifacts.write_json(&s.output, &fit.params)?;
                if let Some(report) = &s.report {
                    self.artifacts.write_json(report, &fit)?;
                }
            }
            Stage::FitRevenue(s) => {
                let points = match (&s.input, &s.points) {
                    (Some(input), None) => read_revenue_points(&self.input(input))?,
                    (None, Some(p)) => p.clone(),
                    _ => {
                        return Err(CliError::Config(
                            "fit_revenue needs exactly one of input or points".into(),
                        ))
                    }
                };
                let g = fit_revenue_map(&points)?;
                self.artifacts.write_json(&s.output, &g)?;
            }
            Stage::SimulateCost(s) => {
                let mcet = MachineCostEstimator::new(s.executor.clone(), s.cost.clone())?;
                let est = mcet.estimate_all(&s.specs)?;
                let rows: Vec<ops::EstimateRow> = s
                    .specs
                    .iter()
                    .zip(&est)
                    .enumerate()
                    .map(|(i, (spec, e))| {
                        ops::EstimateRow::new(format!("specs[{i}]"), spec.label(), e)
                    })
                    .collect();
                self.artifacts.write_json(&s.output, &rows)?;
                if let Some(csv) = &s.csv_output {
                    self.artifacts.write(csv, &ops::estimates_csv(&rows)?)?;
                }
            }
            Stage::OptimizeRoi(s) => {
                let problem = RoiProblem {
                    scenario: Scenario {
                        name: "roi".into(),
                        space: s.space.clone(),
                        bnsl: self.bnsl(&s.bnsl)?,
                        g: self.revenue_map(&s.revenue_map)?,
                        cost: s.cost.clone(),
                        executor: s.executor.clone(),
                    },
                    lambda: s.lambda,
                    budget: s.budget,
                };
                let plan = solve_roi_constrained(&problem)?;
                self.artifacts.write_json(&s.output, &plan)?;
                if let Some(csv) = &s.ledger_csv {
                    self.artifacts.write(csv, &ops::ledger_csv(&plan)?)?;
                }
            }
            Stage::Allocate(s) => {
                let scenarios = s
                    .scenarios
                    .iter()
                    .map(|c| {
                        Ok(Scenario {
                            name: c.name.clone(),
                            space: c.space.clone(),
                            bnsl: self.bnsl(&c.bnsl)?,
                            g: self.revenue_map(&c.revenue_map)?,
                            cost: c.cost.clone(),
                            executor: c.executor.clone(),
                        })
                    })
                    .collect::<CliResult<Vec<_>>>()?;
                let plan = solve_allocation(&AllocationProblem {
                    scenarios,
                    budget: s.budget,
                    roi_floor: s.roi_floor,
                })?;
                self.artifacts.write_json(&s.output, &plan)?;
                if let Some(csv) = &s.ledger_csv {
                    self.artifacts.write(csv, &ops::ledger_csv(&plan)?)?;
                }
            }
            Stage::EmitCurve(s) => {
                let rows = emit_curve_samples(
                    &self.bnsl(&s.bnsl)?,
                    &self.revenue_map(&s.revenue_map)?,
                    (s.lo, s.hi),
                    s.n,
                )?;
                self.artifacts.write(&s.output, &csv_bytes(&rows)?)?;
            }
        }
        Ok(())
    }
}

pub fn flops_grid(r: FlopsRange) -> CliResult<Vec<f64>> {
    if !(r.lo > 0.0 && r.lo < r.hi && r.hi.is_finite() && r.n >= 2) {
        return Err(CliError::Config(format!(
            "flops range needs 0 < lo < hi and n >= 2, got {r:?}"
        )));
    }
    Ok(log_space(r.lo, r.hi, r.n))
}

#[derive(Debug, Deserialize)]
struct RevenuePoint {
    r_over_rstar: f64,
    revenue: f64,
}

pub fn read_revenue_points(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let bytes = read_bytes(path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    rdr.deserialize::<RevenuePoint>()
        .map(|r| {
            r.map(|p| (p.r_over_rstar, p.revenue)).map_err(|e| {
                CliError::Core(adscale::Error::Parse {
                    line: e.position().map_or(0, |p| p.line() as usize),
                    message: format!("{}: {e}", path.display()),
                })
            })
        })
        .collect()
}

/// Checks that every stage input is produced by an earlier stage or exists on
/// disk, and that no stage reads its own output.
pub fn preflight(cfg: &PipelineConfig, base_dir: &Path) -> CliResult<()> {
    if cfg.stages.is_empty() {
        return Err(CliError::Config("pipeline has no stages".into()));
    }
    let mut produced = BTreeSet::new();
    for (i, stage) in cfg.stages.iter().enumerate() {
        for input in stage.inputs() {
            if !produced.contains(input) && !base_dir.join(input).exists() {
                return Err(CliError::Config(format!(
                    "stage {i} ({}) reads {input}, which no earlier stage produces and {} does not exist",
                    stage.kind(),
                    base_dir.join(input).display()
                )));
            }
        }
        for out in stage.outputs() {
            if Path::new(out).is_absolute() || out.split(['/', '\\']).any(|c| c == "..") {
                return Err(CliError::Config(format!(
                    "stage {i} ({}) output {out} must stay inside the output directory",
                    stage.kind()
                )));
            }
            if out == MANIFEST {
                return Err(CliError::Config(format!("{MANIFEST} is reserved")));
            }
            produced.insert(out);
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub out_dir: PathBuf,
}

/// Runs every stage in order. On failure the artifacts of this run are
/// removed and the manifest records the failing stage.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    config_bytes: &[u8],
    base_dir: &Path,
    out_dir: &Path,
) -> CliResult<RunOutcome> {
    preflight(cfg, base_dir)?;
    let mut run = Run {
        seed: cfg.seed,
        base_dir,
        artifacts: ArtifactSet::new(out_dir),
    };
    let mut stages: Vec<StageRecord> = cfg
        .stages
        .iter()
        .enumerate()
        .map(|(index, s)| StageRecord {
            index,
            kind: s.kind().into(),
            outputs: s.outputs().into_iter().map(String::from).collect(),
            status: "pending".into(),
        })
        .collect();
    let mut manifest = Manifest {
        tool: "adscale".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config_sha256: sha256_hex(config_bytes),
        status: "ok".into(),
        stages: Vec::new(),
        artifacts: Vec::new(),
        failure: None,
    };

    for (i, stage) in cfg.stages.iter().enumerate() {
        log::info!("stage {i}: {}", stage.kind());
        if let Err(e) = run.execute(stage) {
            let err = CliError::Stage {
                index: i,
                name: stage.kind().into(),
                source: Box::new(e),
            };
            log::error!("{err}");
            run.artifacts.rollback();
            stages[i].status = "failed".into();
            for s in &mut stages[i + 1..] {
                s.status = "skipped".into();
            }
            manifest.status = "failed".into();
            manifest.stages = stages;
            manifest.failure = Some(Failure {
                stage: i,
                kind: stage.kind().into(),
                message: err.to_string(),
                exit_code: err.exit_code(),
            });
            write_atomic(
                &out_dir.join(MANIFEST),
                &crate::artifacts::json_bytes(&manifest)?,
            )?;
            return Err(err);
        }
        stages[i].status = "ok".into();
    }
    manifest.stages = stages;
    manifest.artifacts = run.artifacts.records();
    write_atomic(
        &out_dir.join(MANIFEST),
        &crate::artifacts::json_bytes(&manifest)?,
    )?;
    Ok(RunOutcome {
        manifest,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Loads a config file and runs it. `out_dir` overrides the config's own
/// output directory; `seed` overrides its seed.
pub fn run_pipeline_file(
    path: &Path,
    out_dir: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<RunOutcome> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut cfg = parse_config(&text, path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let out = match (out_dir, &cfg.out_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => base_dir.join(o),
        (None, None) => base_dir.join("artifacts"),
    };
    run_pipeline(&cfg, &bytes, base_dir, &out)
}
