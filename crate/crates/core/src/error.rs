use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI reports them: configuration problems
/// (exit code 2), numerical / domain guards (exit code 3) and no-data
/// outcomes (exit code 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("level mismatch: configuration at level {config}, bond layer at level {layer}")]
    LevelMismatch { config: u32, layer: u32 },

    #[error("level {level} outside the simulated range 0..={max}")]
    LevelOutOfRange { level: u32, max: u32 },

    #[error("occupied site crossed the right edge of the window at level {level}; enlarge the window")]
    WindowOverflow { level: u32 },

    #[error("numerical guard tripped: {0}")]
    Guard(String),

    #[error("cannot project the empty configuration onto a cylinder pattern")]
    EmptyProjection,

    #[error("projection depth {r} exceeds the reliable depth {depth} of a left-truncated configuration")]
    ProjectionDepth { r: usize, depth: usize },

    #[error("distribution supports use incompatible encodings (width {left} vs {right})")]
    SupportMismatch { left: u64, right: u64 },

    #[error("no data: {0}")]
    NoData(String),

    #[error("log-linear fit needs at least 3 eligible points, found {0}")]
    TooFewPoints(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::LevelMismatch { .. } => 2,
            Error::LevelOutOfRange { .. }
            | Error::WindowOverflow { .. }
            | Error::Guard(_)
            | Error::EmptyProjection
            | Error::ProjectionDepth { .. }
            | Error::SupportMismatch { .. }
            | Error::TooFewPoints(_) => 3,
            Error::NoData(_) => 4,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
