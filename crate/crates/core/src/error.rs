use thiserror::Error;

/// Coarse failure classes; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Estimation,
    Inference,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("empty cell in column `{column}` at data row {row}")]
    EmptyValue { row: usize, column: String },
    #[error("non-numeric value `{value}` in column `{column}` at data row {row}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),
    #[error("time-varying covariate `{column}` for unit `{unit}`")]
    TimeVaryingCovariate { unit: String, column: String },
    #[error("invalid period pair (t={t}, s={s}): need 1 <= s < t <= {n_periods}")]
    InvalidPeriods { t: usize, s: usize, n_periods: usize },
    #[error("custom effective treatment returned reserved negative code {code} (unit {unit}, period {period})")]
    NegativeCode { unit: usize, period: usize, code: i64 },
    #[error("invalid cell {cell}: {reason}")]
    InvalidCell { cell: String, reason: String },
    #[error("empty cell {cell}: {movers} movers, {stayers} stayers")]
    EmptyCell {
        cell: String,
        movers: usize,
        stayers: usize,
    },
    #[error("too few observations for {model} in cell {cell}: need {needed}, have {got}")]
    TooFewObservations {
        model: &'static str,
        cell: String,
        needed: usize,
        got: usize,
    },
    #[error("collinear design for {model} in cell {cell} (inverse condition {inverse_condition:e})")]
    Collinearity {
        model: &'static str,
        cell: String,
        inverse_condition: f64,
    },
    #[error("separation in GPS fit for cell {cell}: coefficient norm {norm:.1} exceeds bound; reduce the covariate set")]
    Separation { cell: String, norm: f64 },
    #[error("GPS fit for cell {cell} did not converge after {iterations} iterations (score norm {score_norm:e})")]
    NonConvergence {
        cell: String,
        iterations: usize,
        score_norm: f64,
    },
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("degenerate influence (zero standard error) for: {}", .0.join(", "))]
    DegenerateInfluence(Vec<String>),
    #[error("invalid bootstrap configuration: {0}")]
    InvalidBootstrap(String),
    #[error("no pre-trend cells supplied")]
    NoPretrendCells,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{flagged} of {reps} replications failed (limit 1%); first failure: {first}")]
    TooManyFailedReps {
        flagged: usize,
        reps: usize,
        first: String,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Io(_) | Csv(_) | InvalidSchema(_) | MissingColumn(_) | EmptyValue { .. }
            | NonNumeric { .. } | UnbalancedPanel(_) | TimeVaryingCovariate { .. }
            | InvalidConfig(_) => ErrorCategory::Input,
            InvalidPeriods { .. } | NegativeCode { .. } | InvalidCell { .. } | EmptyCell { .. }
            | TooFewObservations { .. } | Collinearity { .. } | Separation { .. }
            | NonConvergence { .. } | Aggregation(_) | TooManyFailedReps { .. } => {
                ErrorCategory::Estimation
            }
            DegenerateInfluence(_) | InvalidBootstrap(_) | NoPretrendCells => {
                ErrorCategory::Inference
            }
        }
    }

    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            Io(_) => "IO",
            Csv(_) => "CSV",
            InvalidSchema(_) => "INVALID_SCHEMA",
            MissingColumn(_) => "MISSING_COLUMN",
            EmptyValue { .. } => "EMPTY_VALUE",
            NonNumeric { .. } => "NON_NUMERIC",
            UnbalancedPanel(_) => "UNBALANCED_PANEL",
            TimeVaryingCovariate { .. } => "TIME_VARYING_COVARIATE",
            InvalidPeriods { .. } => "INVALID_PERIODS",
            NegativeCode { .. } => "NEGATIVE_CODE",
            InvalidCell { .. } => "INVALID_CELL",
            EmptyCell { .. } => "EMPTY_CELL",
            TooFewObservations { .. } => "TOO_FEW_OBSERVATIONS",
            Collinearity { .. } => "COLLINEARITY",
            Separation { .. } => "SEPARATION",
            NonConvergence { .. } => "NON_CONVERGENCE",
            Aggregation(_) => "AGGREGATION",
            DegenerateInfluence(_) => "DEGENERATE_INFLUENCE",
            InvalidBootstrap(_) => "INVALID_BOOTSTRAP",
            NoPretrendCells => "NO_PRETREND_CELLS",
            InvalidConfig(_) => "INVALID_CONFIG",
            TooManyFailedReps { .. } => "TOO_MANY_FAILED_REPS",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
