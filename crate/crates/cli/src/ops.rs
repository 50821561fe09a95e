//! Report builders shared by the subcommands and the pipeline.

use adscale::arf::{evaluate_dataset, ArfConfig};
use adscale::costsim::MachineEstimate;
use adscale::domain::Dataset;
use adscale::metrics::{evaluate, MetricConfig, MetricReport, MetricSummary};
use adscale::planner::{CandidateRejection, PlanResult};
use serde::{Deserialize, Serialize};

use crate::artifacts::csv_bytes;
use crate::error::CliResult;

/// Means plus per-impression values; the JSON report carries both.
pub fn metrics_report(ds: &Dataset, cfg: &MetricConfig) -> CliResult<MetricReport> {
    Ok(evaluate(ds, cfg)?)
}

pub fn metrics_csv(s: &MetricSummary) -> CliResult<Vec<u8>> {
    csv_bytes(std::slice::from_ref(s))
}

#[derive(Debug, Serialize)]
struct LossRow<'a> {
    id: &'a str,
    relax: f64,
    global: f64,
    total: f64,
    clamped: usize,
}

/// Per-impression losses followed by a `mean` row.
pub fn arf_csv(ds: &Dataset, cfg: &ArfConfig) -> CliResult<Vec<u8>> {
    let (rows, mean) = evaluate_dataset(ds, cfg)?;
    let mut out: Vec<LossRow> = rows
        .iter()
        .map(|r| LossRow {
            id: &r.id,
            relax: r.losses.relax,
            global: r.losses.global,
            total: r.losses.total,
            clamped: r.losses.clamped,
        })
        .collect();
    out.push(LossRow {
        id: "mean",
        relax: mean.relax,
        global: mean.global,
        total: mean.total,
        clamped: mean.clamped,
    });
    csv_bytes(&out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub spec_path: String,
    pub label: String,
    pub qps: f64,
    pub latency: f64,
    pub req: Option<f64>,
    pub req_ceiled: Option<u64>,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
}

impl EstimateRow {
    pub fn new(spec_path: String, label: String, e: &MachineEstimate) -> Self {
        Self {
            spec_path,
            label,
            qps: e.qps,
            latency: e.latency,
            req: e.req,
            req_ceiled: e.req_ceiled,
            feasible: e.feasible,
            cost: e.cost,
        }
    }
}

#[derive(Debug, Serialize)]
struct EstimateCsvRow<'a> {
    spec_path: &'a str,
    label: &'a str,
    qps: f64,
    latency: f64,
    req: Option<f64>,
    req_ceiled: Option<u64>,
    feasible: bool,
    cost: Option<f64>,
}

pub fn estimates_csv(rows: &[EstimateRow]) -> CliResult<Vec<u8>> {
    let flat: Vec<EstimateCsvRow> = rows
        .iter()
        .map(|r| EstimateCsvRow {
            spec_path: &r.spec_path,
            label: &r.label,
            qps: r.qps,
            latency: r.latency,
            req: r.req,
            req_ceiled: r.req_ceiled,
            feasible: r.feasible,
            cost: r.cost,
        })
        .collect();
    csv_bytes(&flat)
}

#[derive(Debug, Serialize)]
struct LedgerRow<'a> {
    scenario: &'a str,
    index: usize,
    label: &'a str,
    flops: u64,
    r_over_rstar: f64,
    revenue: f64,
    machines: Option<f64>,
    machines_ceiled: Option<u64>,
    cost: Option<f64>,
    budget_cost: Option<f64>,
    roi: Option<f64>,
    feasible: bool,
    chosen: bool,
    rejection: &'static str,
}

/// The candidate ledger of a plan as one CSV table.
pub fn ledger_csv(plan: &PlanResult) -> CliResult<Vec<u8>> {
    let mut rows = Vec::new();
    for (s, ledger) in plan.ledger.iter().enumerate() {
        let pick = plan.chosen.get(s).map(|c| c.index);
        for c in &ledger.candidates {
            rows.push(LedgerRow {
                scenario: &ledger.name,
                index: c.index,
                label: &c.label,
                flops: c.flops,
                r_over_rstar: c.r_over_rstar,
                revenue: c.revenue,
                machines: c.machines,
                machines_ceiled: c.machines_ceiled,
                cost: c.cost,
                budget_cost: c.budget_cost,
                roi: c.roi,
                feasible: c.feasible,
                chosen: pick == Some(c.index),
                rejection: match c.rejection {
                    None => "",
                    Some(CandidateRejection::LatencyLimit) => "latency_limit",
                    Some(CandidateRejection::RoiBelowFloor { .. }) => "roi_below_floor",
                    Some(CandidateRejection::OverBudget { .. }) => "over_budget",
                },
            });
        }
    }
    csv_bytes(&rows)
}
