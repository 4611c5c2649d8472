use thiserror::Error;

/// Errors produced by estimation, inference and data handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("duplicate observation for unit `{unit}` at time {time}")]
    DuplicateCell { unit: String, time: i64 },

    #[error("unbalanced panel, missing cells: {}", format_cells(.missing))]
    Unbalanced { missing: Vec<(String, i64)> },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("infeasible instrument at t={t}, lag {lag}: {message}")]
    InstrumentSpec {
        t: usize,
        lag: usize,
        message: String,
    },

    #[error("weight matrix is singular (smallest eigenvalue {min_eigenvalue:e})")]
    SingularWeight { min_eigenvalue: f64 },

    #[error("rank-deficient moment Jacobian at gamma={gamma}")]
    RankDeficient { gamma: f64 },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("negative test statistic {value:e} exceeds numerical tolerance")]
    NegativeStatistic { value: f64 },

    #[error("degenerate bootstrap distribution: {0}")]
    Degenerate(String),

    #[error("{failed} of {total} bootstrap replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_cells(cells: &[(String, i64)]) -> String {
    const SHOWN: usize = 10;
    let mut out = cells
        .iter()
        .take(SHOWN)
        .map(|(u, t)| format!("({u}, {t})"))
        .collect::<Vec<_>>()
        .join(", ");
    if cells.len() > SHOWN {
        out.push_str(&format!(" and {} more", cells.len() - SHOWN));
    }
    out
}

pub type Result<T> = std::result::Result<T, Error>;
