use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation vector")]
    DegenerateSixd,
    #[error("matrix is not a proper rotation")]
    InvalidRotation,
    #[error("degenerate point configuration (covariance rank < 2)")]
    DegenerateConfiguration,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty correspondence set")]
    EmptyCorrespondence,
    #[error("need at least 3 correspondences, got {0}")]
    InsufficientCorrespondence(usize),
    #[error("no consensus: best hypothesis has {0} inliers")]
    NoConsensus(usize),
    #[error("k = {k} is too large for {n} nodes")]
    KTooLarge { k: usize, n: usize },
    #[error("pose graph is disconnected")]
    DisconnectedGraph,
    #[error("node {0} has no neighbors")]
    IsolatedNode(usize),
    #[error("singular linear system")]
    SingularSystem,
    #[error("unknown benchmark profile {0:?}")]
    UnknownProfile(String),
    #[error("could not sample a connected scene after {0} attempts")]
    DisconnectedSample(usize),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("missing parameter {0:?}")]
    MissingParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
