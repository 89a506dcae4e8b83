use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("oracle query budget exhausted: need {needed} more queries, {remaining} remaining")]
    BudgetExhausted { needed: u64, remaining: u64 },

    #[error("refusing to materialize a layer with d_inp = {d_inp} (limit {limit})")]
    MaterializeGuard { d_inp: usize, limit: usize },

    #[error("backward called without a matching forward pass")]
    StaleCache,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("run directory {0} is not empty (use --force to overwrite)")]
    RunDirNotEmpty(PathBuf),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
