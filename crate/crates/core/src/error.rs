use thiserror::Error;

/// Everything that can go wrong inside the simulator.
///
/// Variants map one-to-one onto the failure classes the pipeline reports;
/// per-node failures carry the node id so the orchestrator can attribute them.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("band conflict: node {existing} and node {incoming} overlap")]
    BandConflict { existing: u32, incoming: u32 },

    #[error("duplicate node id {0}")]
    DuplicateNode(u32),

    #[error("invalid sample rate: {0}")]
    InvalidSampleRate(String),

    #[error("illegal band: node {0} is not registered")]
    IllegalBand(u32),

    #[error("frame sync failed: peak-to-sidelobe ratio {psr:.2} below {threshold}")]
    SyncFailure { psr: f64, threshold: f64 },

    #[error("pilot phase estimate unreliable: pilot SNR {snr:.2} below {threshold}")]
    PhaseEstimateUnreliable { snr: f64, threshold: f64 },

    #[error("alignment error: lag-0 correlation {0:.4} below 0.1")]
    AlignmentError(f64),

    #[error("spectrum baseline missing for node {0}")]
    BaselineRequired(u32),

    #[error("no common event: normalized correlation peak {0:.3} below 0.5")]
    NoCommonEvent(f64),

    #[error("localization failed: {0}")]
    LocalizationFailure(String),

    #[error("degenerate geometry: {0}")]
    GeometryError(String),

    #[error("invalid attenuation model: {0}")]
    InvalidModel(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("node {node}: {source}")]
    Node {
        node: u32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attach a node id to an error, leaving already-attributed errors alone.
    pub fn for_node(self, node: u32) -> Self {
        match self {
            Error::Node { .. } => self,
            other => Error::Node {
                node,
                source: Box::new(other),
            },
        }
    }

    /// True for errors that come from bad configuration rather than from a
    /// simulation run going wrong.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Parse(_)
                | Error::BandConflict { .. }
                | Error::DuplicateNode(_)
                | Error::GeometryError(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
