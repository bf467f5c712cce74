use thiserror::Error;

#[derive(Error, Debug)]
pub enum PvcError {
    /// Shape disagreement between operands; `detail` names the offending axis.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Shape arithmetic failure while tracing a network; `block` is the
    /// zero-based index of the first block that cannot be built.
    #[error("network config rejected at block {block}: {detail}")]
    BlockShape { block: usize, detail: String },

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("window error: {0}")]
    Window(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PvcError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        PvcError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            PvcError::Dimension { .. } => "dimension",
            PvcError::Contract(_) => "contract",
            PvcError::Config(_) | PvcError::BlockShape { .. } => "config",
            PvcError::DegenerateRegion(_) => "degenerate_region",
            PvcError::Window(_) => "window",
            PvcError::NonFinite(_) => "non_finite",
            PvcError::Format(_) => "format",
            PvcError::MissingData(_) => "missing_data",
            PvcError::Io(_) => "io",
            PvcError::Json(_) => "json",
            PvcError::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = PvcError> = std::result::Result<T, E>;
