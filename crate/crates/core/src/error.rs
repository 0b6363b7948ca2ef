use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown element `{0}`")]
    UnknownElement(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("arity mismatch for `{name}`: expected {expected}, got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid signature: {0}")]
    Signature(String),
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("formula syntax: {0}")]
    Syntax(String),
    #[error("set quantification over {size} elements exceeds the cap of {cap}")]
    SetCap { size: usize, cap: usize },
    #[error("automaton: {0}")]
    Automaton(String),
    #[error("no transition for symbol `{0}`")]
    MissingTransition(String),
    #[error("unsupported construct for compilation: {0}")]
    Unsupported(String),
    #[error("decomposition: {0}")]
    Decomposition(String),
    #[error("parse tree: {0}")]
    ParseTree(String),
    #[error("pipeline cap exceeded: {0}")]
    PipelineCap(String),
    #[error("plan precondition: {0}")]
    Precondition(String),
    #[error("mark of length {len} exceeds plan capacity {capacity}")]
    MarkTooLong { len: usize, capacity: usize },
    #[error("invalid mark: {0}")]
    InvalidMark(String),
    #[error("element `{0}` carries no positive weight")]
    Unweighted(String),
    #[error("element `{0}` missing from the oracle answer for its witness")]
    WitnessInconsistent(String),
    #[error("observed weight change {delta} on `{element}` is not +1 or -1")]
    Corrupted { element: String, delta: i64 },
    #[error("exhaustive sweep needs {needed} evaluations, cap is {cap}")]
    SweepCap { needed: u128, cap: u128 },
    #[error("unknown generator kind `{0}`")]
    UnknownGenerator(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
