use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pose count mismatch: {pred} predicted, {gt} ground truth")]
    CountMismatch { pred: usize, gt: usize },
    #[error("no reports given")]
    EmptyInput,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: mdgd_core::Error,
    },
    #[error(transparent)]
    Core(#[from] mdgd_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Tags a core error with the pipeline stage it came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for mdgd_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Stage { stage, source })
    }
}
