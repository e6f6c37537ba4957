use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("data length mismatch: expected {expected} scalars, found {found}")]
    DataLengthMismatch { expected: usize, found: usize },

    #[error("unsupported element type `{0}`")]
    UnsupportedElementType(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("degenerate mask: label {0} covers none or all of the volume")]
    DegenerateMask(u8),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),

    #[error("feature {0} needs probability maps but the context has none")]
    MissingProbabilityMaps(String),

    #[error("feature {feature} is not legal in pass {pass}")]
    IllegalFeature { feature: String, pass: usize },

    #[error("volume `{0}` has an empty band of interest")]
    EmptyBand(String),

    #[error("bad model file: {0}")]
    BadModel(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("missing landmarks: {0}")]
    MissingLandmarks(String),

    #[error("phantom bones {0} and {1} may intersect")]
    IntersectingBones(&'static str, &'static str),

    #[error("{subjects} subjects cannot fill {folds} folds")]
    InsufficientSubjects { subjects: usize, folds: usize },

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error came from the filesystem rather than from the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
