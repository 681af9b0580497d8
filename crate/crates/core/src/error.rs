use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("client {client} has an empty modality set")]
    EmptyModalitySet { client: usize },

    #[error("invalid edge ({0}, {1})")]
    InvalidEdge(usize, usize),

    #[error("modality id {modality} out of range for client {client} (n_modalities = {n_modalities})")]
    InvalidModality { client: usize, modality: usize, n_modalities: usize },

    #[error("subgraph of modality {modality} is disconnected; components: {components:?}")]
    DisconnectedSubgraph { modality: usize, components: Vec<Vec<usize>> },

    #[error("power iteration did not converge after {iterations} iterations (last change {delta:e})")]
    NonConvergent { iterations: usize, delta: f64 },

    #[error("compression factor gamma = {0} must lie in (0, 1]")]
    InvalidGamma(f64),

    #[error("restriction map variance sigma2 = {0} must be positive")]
    InvalidSigma(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("fraction {0} out of range")]
    InvalidFraction(f64),

    #[error("modality {modality} is not available at client {client}")]
    ModalityAbsent { client: usize, modality: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by arithmetic blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonConvergent { .. })
    }
}
