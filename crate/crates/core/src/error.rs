use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file parsed but one of its fields is missing or malformed.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("size mismatch for channel `{channel}`: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        channel: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("manifest integrity: {0}")]
    ManifestIntegrity(String),

    #[error("missing bundle for patient `{patient}`: {path}")]
    MissingFile { patient: String, path: PathBuf },

    #[error("undefined truth for patient `{0}`: no biopsy cores")]
    UndefinedTruth(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("missing pathology label for radiologist-positive ROI `{0}`")]
    MissingLabel(String),

    #[error("degenerate training set: {0}")]
    DegenerateTraining(String),

    #[error(
        "incompatible counts: radiologist positives (tp {rad_tp}, fp {rad_fp}) vs ML totals (tp+fn {ml_pos}, fp+tn {ml_neg})"
    )]
    IncompatibleCounts {
        rad_tp: u64,
        rad_fp: u64,
        ml_pos: u64,
        ml_neg: u64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("target sensitivity {target} outside curve range [{min}, {max}]")]
    Extrapolation { target: f64, min: f64, max: f64 },

    #[error("missing zone truth for patients: {}", .0.join(", "))]
    MissingZoneTruth(Vec<String>),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::SizeMismatch { .. } => "size-mismatch",
            Error::InvalidVolume(_) => "invalid-volume",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::DegenerateGeometry(_) => "degenerate-geometry",
            Error::ManifestIntegrity(_) => "manifest-integrity",
            Error::MissingFile { .. } => "missing-file",
            Error::UndefinedTruth(_) => "undefined-truth",
            Error::Config(_) => "config",
            Error::Layout(_) => "layout",
            Error::MissingLabel(_) => "missing-label",
            Error::DegenerateTraining(_) => "degenerate-training",
            Error::IncompatibleCounts { .. } => "incompatible-counts",
            Error::Domain(_) => "domain",
            Error::Extrapolation { .. } => "extrapolation",
            Error::MissingZoneTruth(_) => "missing-zone-truth",
        }
    }
}
