use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Infeasible,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("impression {id}: {reason}")]
    InvalidImpression { id: String, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no scorable impressions")]
    NoScorableImpressions,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("search grid is empty: {0}")]
    EmptyGrid(String),

    #[error("base model is infeasible: latency {latency:.6}s exceeds limit {t_limit:.6}s")]
    BaseModelInfeasible { latency: f64, t_limit: f64 },

    #[error("no candidate satisfies the ROI floor {lambda}{}", fmt_tightest(*.tightest_lambda))]
    NoFeasibleSpec {
        lambda: f64,
        tightest_lambda: Option<f64>,
    },

    #[error("scenario {scenario} has no candidate with ROI >= {roi_floor}")]
    ScenarioInfeasible { scenario: usize, roi_floor: f64 },

    #[error("budget {budget} is below the minimal feasible budget {minimal_budget}")]
    BudgetInfeasible { budget: f64, minimal_budget: f64 },
}

fn fmt_tightest(tightest: Option<f64>) -> String {
    match tightest {
        Some(l) => format!("; the largest admissible floor is {l}"),
        None => "; no candidate meets the latency limit".to_string(),
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::EmptyGrid(_) => ErrorKind::Config,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::InvalidImpression { .. }
            | Error::EmptyDataset
            | Error::NoScorableImpressions => ErrorKind::Data,
            Error::BaseModelInfeasible { .. }
            | Error::NoFeasibleSpec { .. }
            | Error::ScenarioInfeasible { .. }
            | Error::BudgetInfeasible { .. } => ErrorKind::Infeasible,
            Error::Numeric(_) => ErrorKind::Internal,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
