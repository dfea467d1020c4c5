use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("pose file {path}: {kind}")]
    Pose { path: PathBuf, kind: PoseError },

    #[error("tensor file: {0}")]
    Format(#[from] FormatError),

    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit status used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Io { .. } => 2,
            Error::Divergence { .. } | Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}

/// Validation failures of a pose track file. Each invariant has its own variant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("canvas must be non-empty, got {width}x{height}")]
    InvalidCanvas { width: usize, height: usize },
    #[error("no characters")]
    NoCharacters,
    #[error("character {id} has {found} frames, expected {expected}")]
    FrameCountMismatch { id: u32, expected: usize, found: usize },
    #[error("duplicate character id {0}")]
    DuplicateId(u32),
    #[error("character ids {0:?} are not exactly 1..N")]
    NonContiguousIds(Vec<u32>),
    #[error("character {id} frame {frame} joint {joint}: ({x}, {y}) outside the canvas")]
    KeypointOutOfRange {
        id: u32,
        frame: usize,
        joint: usize,
        x: f64,
        y: f64,
    },
    #[error("character {id} frame {frame} joint {joint}: confidence {confidence} outside [0,1]")]
    InvalidConfidence {
        id: u32,
        frame: usize,
        joint: usize,
        confidence: f64,
    },
    #[error("character {id} frame {frame}: expected {expected} keypoints, found {found}")]
    KeypointCountMismatch {
        id: u32,
        frame: usize,
        expected: usize,
        found: usize,
    },
    #[error("skeleton limb ({0}, {1}) references a joint outside the keypoint list")]
    BadSkeleton(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("header declares {declared} values but payload holds {actual}")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("zero-sized extent in header dims {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("identifier <{id}> used twice (byte {position})")]
    DuplicateId { id: u32, position: usize },
    #[error("malformed identifier at byte {position}")]
    MalformedIdentifier { position: usize },
    #[error("identifier <0> at byte {position}; ids start at 1")]
    ZeroId { position: usize },
    #[error("segment at byte {position} carries more than one identifier")]
    MultipleIdentifiers { position: usize },
    #[error("segment at byte {position} is empty once its identifier is removed")]
    EmptySegment { position: usize },
    #[error("identifier <{id}> refers to a character beyond the {n} available")]
    UnknownCharacter { id: u32, n: usize },
    #[error("prompt contains no tokens")]
    EmptyPrompt,
}
