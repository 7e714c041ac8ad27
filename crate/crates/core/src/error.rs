use thiserror::Error;

/// Errors surfaced by every module; the CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("unsupported order: {0}")]
    UnsupportedOrder(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("stiffness detected: {0}")]
    Stiffness(String),
    #[error("bisection failed: {0}")]
    BisectionFailed(String),
    #[error("no decaying profile: {0}")]
    NonDecaying(String),
    #[error("accuracy refusal: {0}")]
    AccuracyRefusal(String),
    #[error("eigen solver did not converge: {0}")]
    EigenNonConvergence(String),
    #[error("solvability violated: {0}")]
    Solvability(String),
    #[error("accuracy not met: {0}")]
    Accuracy(String),
    #[error("hierarchy failure: {0}")]
    Hierarchy(String),
    #[error("outside domain: {0}")]
    Domain(String),
    #[error("outside basin: {0}")]
    OutOfBasin(String),
    #[error("degenerate decomposition: {0}")]
    DegenerateDecomposition(String),
    #[error("singular modulation system: {0}")]
    SingularModulation(String),
    #[error("numerical instability: {0}")]
    Instability(String),
    #[error("insufficient decay: {0}")]
    InsufficientDecay(String),
    #[error("nondegeneracy failed: {0}")]
    Degenerate(String),
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
