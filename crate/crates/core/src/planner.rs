//! Model-size planning under cost constraints.
//!
//! Two problems are solved by search over explicit candidate sets:
//!
//! * ROI-constrained design: among the candidates whose forecast revenue per
//!   unit of machine cost is at least `lambda`, pick the one with the largest
//!   revenue.
//! * Multi-scenario allocation: pick one candidate per scenario to maximize
//!   total revenue, subject to a shared budget and a per-scenario ROI floor.
//!
//! Revenue is `g(bnsl(flops_per_pair(spec)))`. ROI uses fractional machine
//! counts; budgets use whole machines. Costs are in machines, or in currency
//! when the cost configuration carries a unit price.
//!
//! Ties are broken by higher revenue, then lower cost, then earlier position in
//! the candidate list (lexicographic over scenarios for allocations).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bnsl::{bnsl_eval, BnslParams};
use crate::costsim::{CostSimConfig, ExecutorConfig, MachineCostEstimator, MachineEstimate};
use crate::flopscalc::{
    default_input_dim, flops_per_pair, input_dim, ModelSpec, ServingConfig, DEFAULT_CACHE_LIMIT,
    DEFAULT_DENSE_DIM, DEFAULT_SPARSE_FIELDS,
};
use crate::metrics::RevenueMap;
use crate::{Error, Result};

/// Structural limits of the MLP search grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConstraints {
    pub emb_start: u64,
    pub emb_step: u64,
    pub emb_max: u64,
    pub hidden_start: u64,
    pub hidden_step: u64,
    pub hidden_max: u64,
    /// Hidden layers per candidate; an output layer of width 1 follows.
    pub n_hidden: usize,
    /// Largest first hidden layer (the ad-side cache width).
    pub cache_limit: u64,
    /// Smallest allowed ratio between consecutive hidden layer widths.
    pub min_ratio: f64,
    pub flops_cap: f64,
    pub n_sparse: u64,
    pub dense_dim: u64,
    pub serving: ServingConfig,
}

impl Default for GridConstraints {
    fn default() -> Self {
        Self {
            emb_start: 16,
            emb_step: 16,
            emb_max: 512,
            hidden_start: 128,
            hidden_step: 128,
            hidden_max: 1024,
            n_hidden: 4,
            cache_limit: DEFAULT_CACHE_LIMIT,
            min_ratio: 1.0 / 20.0,
            flops_cap: 143e6,
            n_sparse: DEFAULT_SPARSE_FIELDS,
            dense_dim: DEFAULT_DENSE_DIM,
            serving: ServingConfig::default(),
        }
    }
}

/// Why a layer shape was left out of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRejection {
    Increasing,
    CacheLimit,
    Ratio,
    FlopsCap,
}

impl GridConstraints {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("emb_start", self.emb_start),
            ("emb_step", self.emb_step),
            ("emb_max", self.emb_max),
            ("hidden_start", self.hidden_start),
            ("hidden_step", self.hidden_step),
            ("hidden_max", self.hidden_max),
            ("cache_limit", self.cache_limit),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_hidden == 0 {
            return Err(Error::Config("n_hidden must be at least 1".into()));
        }
        if !(self.min_ratio.is_finite() && self.min_ratio > 0.0 && self.min_ratio <= 1.0) {
            return Err(Error::Config("min_ratio must be in (0, 1]".into()));
        }
        if !(self.flops_cap.is_finite() && self.flops_cap > 0.0) {
            return Err(Error::Config("flops_cap must be positive".into()));
        }
        if self.serving.ads_per_request == 0 {
            return Err(Error::Config("ads_per_request must be positive".into()));
        }
        Ok(())
    }

    fn emb_dims(&self) -> Vec<u64> {
        (self.emb_start..=self.emb_max)
            .step_by(self.emb_step as usize)
            .collect()
    }

    fn hidden_widths(&self) -> Vec<u64> {
        (self.hidden_start..=self.hidden_max)
            .step_by(self.hidden_step as usize)
            .collect()
    }

    fn input_dim(&self, emb: u64) -> u64 {
        if self.n_sparse == DEFAULT_SPARSE_FIELDS && self.dense_dim == DEFAULT_DENSE_DIM {
            default_input_dim(emb)
        } else {
            input_dim(emb, self.n_sparse, self.dense_dim)
        }
    }
}

/// Structural check of a hidden-layer shape (output layer excluded).
pub fn check_hidden(c: &GridConstraints, hidden: &[u64]) -> Option<GridRejection> {
    if hidden.windows(2).any(|w| w[1] > w[0]) {
        return Some(GridRejection::Increasing);
    }
    if hidden.first().is_some_and(|&h| h > c.cache_limit) {
        return Some(GridRejection::CacheLimit);
    }
    if hidden
        .windows(2)
        .any(|w| (w[1] as f64) < c.min_ratio * w[0] as f64)
    {
        return Some(GridRejection::Ratio);
    }
    None
}

fn grid_spec(c: &GridConstraints, emb: u64, hidden: &[u64]) -> ModelSpec {
    let mut layers = Vec::with_capacity(hidden.len() + 2);
    layers.push(c.input_dim(emb));
    layers.extend_from_slice(hidden);
    layers.push(1);
    let mut spec = ModelSpec::mlp(layers);
    spec.serving = c.serving;
    spec
}

/// Non-increasing width tuples of length `n`, in lexicographic order.
fn non_increasing_tuples(widths: &[u64], n: usize) -> Vec<Vec<u64>> {
    fn rec(widths: &[u64], n: usize, prefix: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let cap = prefix.last().copied().unwrap_or(u64::MAX);
        for &w in widths.iter().filter(|&&w| w <= cap) {
            prefix.push(w);
            rec(widths, n, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(widths, n, &mut Vec::with_capacity(n), &mut out);
    out
}

/// Every MLP spec admitted by the constraints, ordered by embedding size and
/// then hidden widths.
pub fn enumerate_grid(c: &GridConstraints) -> Result<Vec<ModelSpec>> {
    c.validate()?;
    let embs = c.emb_dims();
    let widths = c.hidden_widths();
    let shapes = non_increasing_tuples(&widths, c.n_hidden);
    let mut rejected = [0usize; 3];
    let mut admitted_shapes = Vec::new();
    for h in &shapes {
        match check_hidden(c, h) {
            None => admitted_shapes.push(h),
            Some(GridRejection::CacheLimit) => rejected[0] += embs.len(),
            Some(GridRejection::Ratio) => rejected[1] += embs.len(),
            Some(_) => unreachable!("tuples are non-increasing"),
        }
    }
    let mut out = Vec::new();
    for &emb in &embs {
        for h in &admitted_shapes {
            let spec = grid_spec(c, emb, h);
            if flops_per_pair(&spec)? as f64 <= c.flops_cap {
                out.push(spec);
            } else {
                rejected[2] += 1;
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyGrid(format!(
            "{} embedding sizes x {} hidden shapes; rejected by cache_limit={} ({}), min_ratio={} ({}), flops_cap={} ({})",
            embs.len(),
            shapes.len(),
            c.cache_limit,
            rejected[0],
            c.min_ratio,
            rejected[1],
            c.flops_cap,
            rejected[2],
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchSpace {
    Grid(GridConstraints),
    Explicit { specs: Vec<ModelSpec> },
}

impl SearchSpace {
    pub fn specs(&self) -> Result<Vec<ModelSpec>> {
        match self {
            Self::Grid(c) => enumerate_grid(c),
            Self::Explicit { specs } if specs.is_empty() => {
                Err(Error::EmptyGrid("explicit candidate list is empty".into()))
            }
            Self::Explicit { specs } => {
                for s in specs {
                    s.validate()?;
                }
                Ok(specs.clone())
            }
        }
    }
}

/// One model family in one serving scenario: where to search, how revenue is
/// forecast and how machines are costed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub space: SearchSpace,
    pub bnsl: BnslParams,
    pub g: RevenueMap,
    pub cost: CostSimConfig,
    pub executor: ExecutorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiProblem {
    #[serde(flatten)]
    pub scenario: Scenario,
    pub lambda: f64,
    /// Optional cap on the whole-machine cost of the chosen model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub scenarios: Vec<Scenario>,
    pub budget: f64,
    #[serde(default = "default_roi_floor")]
    pub roi_floor: f64,
}

fn default_roi_floor() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum CandidateRejection {
    LatencyLimit,
    RoiBelowFloor { floor: f64 },
    OverBudget { budget: f64 },
}

/// Ledger row for one evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub label: String,
    pub spec: ModelSpec,
    pub flops: u64,
    pub r_over_rstar: f64,
    pub revenue: f64,
    pub machines: Option<f64>,
    pub machines_ceiled: Option<u64>,
    /// Fractional machine cost, priced when a unit price is configured.
    pub cost: Option<f64>,
    /// Whole-machine cost, the quantity budgets constrain.
    pub budget_cost: Option<f64>,
    pub roi: Option<f64>,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<CandidateRejection>,
}

impl Candidate {
    fn reject(&mut self, why: CandidateRejection) {
        self.feasible = false;
        self.rejection = Some(why);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLedger {
    pub name: String,
    pub qps_total: f64,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenSpec {
    pub scenario: String,
    pub index: usize,
    pub spec: ModelSpec,
    pub revenue: f64,
    pub cost: f64,
    pub budget_cost: f64,
    pub roi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Exhaustive,
    GreedyExchange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub candidates: usize,
    pub feasible: usize,
    pub measurements: u64,
    pub combinations: u64,
    pub method: SearchMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub chosen: Vec<ChosenSpec>,
    /// Total forecast revenue of the chosen specs.
    pub objective: f64,
    pub total_cost: f64,
    pub total_budget_cost: f64,
    pub ledger: Vec<ScenarioLedger>,
    pub stats: SearchStats,
}

/// Forecast and cost every candidate of a scenario. Candidates that miss the
/// latency limit are marked infeasible; ROI is not yet checked.
pub fn evaluate_scenario(s: &Scenario) -> Result<(ScenarioLedger, u64)> {
    let specs = s.space.specs()?;
    s.bnsl.validate()?;
    let mcet = MachineCostEstimator::new(s.executor.clone(), s.cost.clone())?;
    let estimates = mcet.estimate_all(&specs)?;
    let price = s.cost.unit_price.unwrap_or(1.0);
    let candidates = specs
        .into_iter()
        .zip(estimates)
        .enumerate()
        .map(|(index, (spec, est))| candidate(index, spec, &est, &s.bnsl, &s.g, price))
        .collect::<Result<Vec<_>>>()?;
    let ledger = ScenarioLedger {
        name: s.name.clone(),
        qps_total: mcet.qps_total(),
        candidates,
    };
    Ok((ledger, mcet.measurements()))
}

fn candidate(
    index: usize,
    spec: ModelSpec,
    est: &MachineEstimate,
    p: &BnslParams,
    g: &RevenueMap,
    price: f64,
) -> Result<Candidate> {
    let flops = flops_per_pair(&spec)?;
    let r = bnsl_eval(p, flops as f64)?;
    let revenue = g.apply(r);
    let cost = est.req.map(|m| m * price);
    let mut c = Candidate {
        index,
        label: spec.label(),
        spec,
        flops,
        r_over_rstar: r,
        revenue,
        machines: est.req,
        machines_ceiled: est.req_ceiled,
        cost,
        budget_cost: est.req_ceiled.map(|m| m as f64 * price),
        roi: cost.map(|c| revenue / c),
        feasible: est.feasible,
        rejection: None,
    };
    if !est.feasible {
        c.reject(CandidateRejection::LatencyLimit);
    }
    Ok(c)
}

/// Apply an ROI floor and optional budget cap to evaluated candidates.
fn screen(candidates: &mut [Candidate], floor: f64, budget: Option<f64>) {
    for c in candidates.iter_mut().filter(|c| c.feasible) {
        if c.roi.unwrap() < floor {
            c.reject(CandidateRejection::RoiBelowFloor { floor });
        } else if let Some(b) = budget {
            if c.budget_cost.unwrap() > b {
                c.reject(CandidateRejection::OverBudget { budget: b });
            }
        }
    }
}

/// Preference order: higher revenue, then lower cost, then earlier index.
fn better(a: &Candidate, b: &Candidate) -> bool {
    cmp_key(
        a.revenue,
        a.cost.unwrap(),
        a.index,
        b.revenue,
        b.cost.unwrap(),
        b.index,
    ) == Ordering::Less
}

fn cmp_key<T: Ord>(
    rev_a: f64,
    cost_a: f64,
    idx_a: T,
    rev_b: f64,
    cost_b: f64,
    idx_b: T,
) -> Ordering {
    rev_b
        .total_cmp(&rev_a)
        .then(cost_a.total_cmp(&cost_b))
        .then(idx_a.cmp(&idx_b))
}

fn chosen(name: &str, c: &Candidate) -> ChosenSpec {
    ChosenSpec {
        scenario: name.to_string(),
        index: c.index,
        spec: c.spec.clone(),
        revenue: c.revenue,
        cost: c.cost.unwrap(),
        budget_cost: c.budget_cost.unwrap(),
        roi: c.roi.unwrap(),
    }
}

pub fn solve_roi_constrained(p: &RoiProblem) -> Result<PlanResult> {
    if !(p.lambda.is_finite() && p.lambda >= 0.0) {
        return Err(Error::Config(
            "lambda must be finite and non-negative".into(),
        ));
    }
    if let Some(b) = p.budget {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::Config("budget must be positive".into()));
        }
    }
    let (mut ledger, measurements) = evaluate_scenario(&p.scenario)?;
    let tightest = ledger
        .candidates
        .iter()
        .filter(|c| c.feasible && p.budget.is_none_or(|b| c.budget_cost.unwrap() <= b))
        .filter_map(|c| c.roi)
        .max_by(f64::total_cmp);
    screen(&mut ledger.candidates, p.lambda, p.budget);

    let mut best: Option<&Candidate> = None;
    for c in ledger.candidates.iter().filter(|c| c.feasible) {
        if best.is_none_or(|b| better(c, b)) {
            best = Some(c);
        }
    }
    let Some(best) = best else {
        return Err(Error::NoFeasibleSpec {
            lambda: p.lambda,
            tightest_lambda: tightest,
        });
    };
    let pick = chosen(&ledger.name, best);
    let stats = SearchStats {
        candidates: ledger.candidates.len(),
        feasible: ledger.candidates.iter().filter(|c| c.feasible).count(),
        measurements,
        combinations: ledger.candidates.len() as u64,
        method: SearchMethod::Exhaustive,
    };
    Ok(PlanResult {
        objective: pick.revenue,
        total_cost: pick.cost,
        total_budget_cost: pick.budget_cost,
        chosen: vec![pick],
        ledger: vec![ledger],
        stats,
    })
}

/// Largest scenario count searched exhaustively.
pub const EXHAUSTIVE_MAX_SCENARIOS: usize = 3;

#[derive(Clone, Copy)]
struct Choice {
    index: usize,
    revenue: f64,
    cost: f64,
    budget_cost: f64,
}

/// Drop options that another option beats on every count: no less revenue,
/// no more cost of either kind, and an earlier index. Such an option can never
/// be part of the preferred plan.
fn undominated(opts: &[Choice]) -> Vec<Choice> {
    opts.iter()
        .filter(|a| {
            !opts.iter().any(|b| {
                b.index < a.index
                    && b.revenue >= a.revenue
                    && b.cost <= a.cost
                    && b.budget_cost <= a.budget_cost
            })
        })
        .copied()
        .collect()
}

#[derive(Clone)]
struct Plan {
    picks: Vec<usize>,
    revenue: f64,
    cost: f64,
    budget_cost: f64,
}

fn totals(opts: &[Vec<Choice>], pos: &[usize]) -> (f64, f64, f64) {
    let mut t = (0.0, 0.0, 0.0);
    for (s, &i) in pos.iter().enumerate() {
        let o = &opts[s][i];
        t.0 += o.revenue;
        t.1 += o.cost;
        t.2 += o.budget_cost;
    }
    t
}

fn plan_at(opts: &[Vec<Choice>], pos: &[usize]) -> Plan {
    let (revenue, cost, budget_cost) = totals(opts, pos);
    Plan {
        picks: pos
            .iter()
            .enumerate()
            .map(|(s, &i)| opts[s][i].index)
            .collect(),
        revenue,
        cost,
        budget_cost,
    }
}

fn plan_better(a: &Plan, b: &Plan) -> bool {
    cmp_key(a.revenue, a.cost, &a.picks, b.revenue, b.cost, &b.picks) == Ordering::Less
}

/// Exhaustive search over the product of per-scenario options. Options are
/// visited in increasing whole-machine cost so over-budget branches stop early.
fn exhaustive(opts: &[Vec<Choice>], budget: f64, visited: &mut u64) -> Option<Plan> {
    let sorted: Vec<Vec<Choice>> = opts
        .iter()
        .map(|o| {
            let mut o = o.clone();
            o.sort_by(|a, b| {
                a.budget_cost
                    .total_cmp(&b.budget_cost)
                    .then(a.index.cmp(&b.index))
            });
            o
        })
        .collect();
    // cheapest completion of scenarios s.. for pruning
    let mut min_rest = vec![0.0; sorted.len() + 1];
    for s in (0..sorted.len()).rev() {
        min_rest[s] = min_rest[s + 1] + sorted[s][0].budget_cost;
    }
    let mut best: Option<Plan> = None;
    let mut pos = vec![0usize; sorted.len()];
    #[allow(clippy::too_many_arguments)]
    fn rec(
        s: usize,
        spent: f64,
        sorted: &[Vec<Choice>],
        min_rest: &[f64],
        budget: f64,
        pos: &mut Vec<usize>,
        best: &mut Option<Plan>,
        visited: &mut u64,
    ) {
        if s == sorted.len() {
            *visited += 1;
            let plan = plan_at(sorted, pos);
            // the running sum may round differently from the in-order total
            if plan.budget_cost <= budget && best.as_ref().is_none_or(|b| plan_better(&plan, b)) {
                *best = Some(plan);
            }
            return;
        }
        for (i, o) in sorted[s].iter().enumerate() {
            if spent + o.budget_cost + min_rest[s + 1] > budget * (1.0 + 1e-12) {
                break;
            }
            pos[s] = i;
            rec(
                s + 1,
                spent + o.budget_cost,
                sorted,
                min_rest,
                budget,
                pos,
                best,
                visited,
            );
        }
    }
    rec(
        0, 0.0, &sorted, &min_rest, budget, &mut pos, &mut best, visited,
    );
    best
}

/// Greedy upgrades by revenue gained per unit of budget, then pairwise
/// exchanges until no single or paired change improves the plan.
fn greedy_exchange(opts: &[Vec<Choice>], budget: f64, visited: &mut u64) -> Option<Plan> {
    let cheapest = |o: &[Choice]| {
        (0..o.len())
            .min_by(|&a, &b| {
                o[a].budget_cost
                    .total_cmp(&o[b].budget_cost)
                    .then(o[b].revenue.total_cmp(&o[a].revenue))
                    .then(o[a].index.cmp(&o[b].index))
            })
            .unwrap()
    };
    let mut pos: Vec<usize> = opts.iter().map(|o| cheapest(o)).collect();
    let mut cur = plan_at(opts, &pos);
    if cur.budget_cost > budget {
        return None;
    }

    loop {
        let mut step: Option<(f64, usize, usize)> = None;
        for (s, o) in opts.iter().enumerate() {
            for (i, cand) in o.iter().enumerate() {
                let held = &o[pos[s]];
                let gain = cand.revenue - held.revenue;
                if gain <= 0.0 {
                    continue;
                }
                *visited += 1;
                let extra = cand.budget_cost - held.budget_cost;
                if cur.budget_cost + extra > budget {
                    continue;
                }
                let density = if extra <= 0.0 {
                    f64::INFINITY
                } else {
                    gain / extra
                };
                if step.is_none_or(|(d, _, _)| density > d) {
                    step = Some((density, s, i));
                }
            }
        }
        let Some((_, s, i)) = step else { break };
        pos[s] = i;
        cur = plan_at(opts, &pos);
    }

    loop {
        let mut improved = false;
        for a in 0..opts.len() {
            for b in a..opts.len() {
                for ia in 0..opts[a].len() {
                    let b_range = if a == b { 0..1 } else { 0..opts[b].len() };
                    for ib in b_range {
                        let mut trial = pos.clone();
                        trial[a] = ia;
                        if a != b {
                            trial[b] = ib;
                        }
                        *visited += 1;
                        let plan = plan_at(opts, &trial);
                        if plan.budget_cost <= budget && plan_better(&plan, &cur) {
                            pos = trial;
                            cur = plan;
                            improved = true;
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    Some(cur)
}

pub fn solve_allocation(p: &AllocationProblem) -> Result<PlanResult> {
    if p.scenarios.is_empty() {
        return Err(Error::Config(
            "allocation needs at least one scenario".into(),
        ));
    }
    if !(p.budget.is_finite() && p.budget > 0.0) {
        return Err(Error::Config("budget must be positive".into()));
    }
    if !(p.roi_floor.is_finite() && p.roi_floor >= 0.0) {
        return Err(Error::Config(
            "roi_floor must be finite and non-negative".into(),
        ));
    }
    let mut ledgers = Vec::with_capacity(p.scenarios.len());
    let mut measurements = 0;
    for s in &p.scenarios {
        let (mut ledger, m) = evaluate_scenario(s)?;
        screen(&mut ledger.candidates, p.roi_floor, None);
        measurements += m;
        ledgers.push(ledger);
    }

    let mut opts = Vec::with_capacity(ledgers.len());
    for (i, l) in ledgers.iter().enumerate() {
        let o: Vec<Choice> = l
            .candidates
            .iter()
            .filter(|c| c.feasible)
            .map(|c| Choice {
                index: c.index,
                revenue: c.revenue,
                cost: c.cost.unwrap(),
                budget_cost: c.budget_cost.unwrap(),
            })
            .collect();
        if o.is_empty() {
            return Err(Error::ScenarioInfeasible {
                scenario: i,
                roi_floor: p.roi_floor,
            });
        }
        opts.push(undominated(&o));
    }
    let minimal_budget: f64 = opts
        .iter()
        .map(|o| {
            o.iter()
                .map(|x| x.budget_cost)
                .fold(f64::INFINITY, f64::min)
        })
        .sum();

    let mut visited = 0;
    let (plan, method) = if opts.len() <= EXHAUSTIVE_MAX_SCENARIOS {
        (
            exhaustive(&opts, p.budget, &mut visited),
            SearchMethod::Exhaustive,
        )
    } else {
        (
            greedy_exchange(&opts, p.budget, &mut visited),
            SearchMethod::GreedyExchange,
        )
    };
    let Some(plan) = plan else {
        return Err(Error::BudgetInfeasible {
            budget: p.budget,
            minimal_budget,
        });
    };

    let chosen: Vec<ChosenSpec> = plan
        .picks
        .iter()
        .zip(&ledgers)
        .map(|(&i, l)| chosen(&l.name, &l.candidates[i]))
        .collect();
    let stats = SearchStats {
        candidates: ledgers.iter().map(|l| l.candidates.len()).sum(),
        feasible: opts.iter().map(Vec::len).sum(),
        measurements,
        combinations: visited,
        method,
    };
    Ok(PlanResult {
        chosen,
        objective: plan.revenue,
        total_cost: plan.cost,
        total_budget_cost: plan.budget_cost,
        ledger: ledgers,
        stats,
    })
}
