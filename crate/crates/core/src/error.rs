use thiserror::Error;

/// Errors surfaced by model construction, numerics, estimation, and recovery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("agent {agent} has no edge to {other}; active sets must be subsets of the reference group")]
    NotAPeer { agent: usize, other: usize },

    #[error("subset enumeration too large: agent {agent} has {peers} peers (cap {cap})")]
    EnumerationTooLarge {
        agent: usize,
        peers: usize,
        cap: usize,
    },

    #[error("state space too large: {states} configurations (cap {cap})")]
    StateCapExceeded { states: usize, cap: usize },

    #[error("tabular choice rule has no entry for type {agent_type}, own choice {own}, composition {counts:?}")]
    OffGridLookup {
        agent_type: usize,
        own: usize,
        counts: Vec<usize>,
    },

    #[error("non-unique equilibrium: generator null space has dimension {nullity} (boundary Q or zero rates?)")]
    NonUniqueEquilibrium { nullity: usize },

    #[error("zero denominator in two-agent closed form")]
    DegenerateClosedForm,

    #[error("need at least 2 snapshots (horizon {horizon}, interval {delta})")]
    TooFewSnapshots { horizon: f64, delta: f64 },

    #[error("CCP cells missing for required configurations: {0:?}")]
    MissingCcpCells(Vec<String>),

    #[error("transition matrix rows never visited: {rows:?}; generator recovery blocked")]
    UnvisitedRows { rows: Vec<usize> },

    #[error("infeasible contrast ratio {rho} for type {agent_type} pair ({own},{peer}): feasible interval is (1, {upper})")]
    InfeasibleRatio {
        agent_type: usize,
        own: usize,
        peer: usize,
        rho: f64,
        upper: f64,
    },

    #[error("insufficient contrast for type {agent_type} pair ({own},{peer}): |denominator| {denom} below noise floor")]
    InsufficientContrast {
        agent_type: usize,
        own: usize,
        peer: usize,
        denom: f64,
    },

    #[error("peer-count variation too limited for type {agent_type}: need at least 3 distinct sizes, found {found:?}")]
    NotEnoughSizeVariation {
        agent_type: usize,
        found: Vec<usize>,
    },

    #[error("peer-count coverage gap for type {agent_type}: sizes {missing:?} absent from {{2..{max}}}")]
    SizeCoverageGap {
        agent_type: usize,
        missing: Vec<usize>,
        max: usize,
    },

    #[error("recursion blocked at size {size}, own choice {own}, composition {counts:?}: {reason}")]
    RecursionBlocked {
        size: usize,
        own: usize,
        counts: Vec<usize>,
        reason: String,
    },

    #[error("embedding not identified for this sampling interval: {0}")]
    EmbeddingCondition(String),

    #[error("nonpositive clock rate for agent {0}")]
    NonPositiveRate(usize),

    #[error("probability {value} outside (0,1) for {context}")]
    ProbabilityOutOfRange { value: f64, context: String },

    #[error("rates required: the snapshot pipeline cannot separate clock rates from the generator")]
    RatesRequired,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error in {file} line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
