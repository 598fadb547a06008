use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // audio ingestion
    #[error("not a RIFF/WAVE PCM file: {0}")]
    NotWav(String),
    #[error("unsupported channel count {0} (only mono is accepted)")]
    UnsupportedChannels(u16),
    #[error("unsupported bit depth {0} (only 16-bit PCM is accepted)")]
    UnsupportedBitDepth(u16),
    #[error("sample rate mismatch: expected {expected} Hz, file has {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("malformed line {line_no}: {line:?}")]
    MalformedLine { line_no: usize, line: String },
    #[error("unknown label {0:?} (expected bonafide or spoof)")]
    UnknownLabel(String),
    #[error("class {0} has fewer than 2 members")]
    EmptyClass(&'static str),
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    // features
    #[error("signal too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    // tensor engine
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    // model / adapters
    #[error("unknown adapter target {0:?}")]
    UnknownAdapterTarget(String),
    #[error("rank {rank} too large for target {target} ({d_out}x{d_in})")]
    RankTooLarge {
        target: String,
        rank: usize,
        d_out: usize,
        d_in: usize,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error(
        "FingerprintMismatch: adapters were trained against base {expected:016x}, \
         but the loaded base is {found:016x}"
    )]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("missing tensor {0:?} in checkpoint")]
    MissingTensor(String),

    // metrics / training
    #[error("scores contain only one class ({0}); EER needs both")]
    OneClassOnly(&'static str),
    #[error("base checkpoint changed during adapter training ({before:016x} -> {after:016x})")]
    BaseMutated { before: u64, after: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. } | Error::Config(_) | Error::UnknownAdapterTarget(_) | Error::RankTooLarge { .. }
        )
    }
}
