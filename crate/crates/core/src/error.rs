use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("bad magic: {0}")]
    BadMagic(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),
    #[error("truncated stream: expected {expected} bytes, found {found}")]
    TruncatedStream { expected: usize, found: usize },
    #[error("non-positive dimension: {0}")]
    NonPositiveDim(String),
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate train fraction {0}")]
    DegenerateFraction(f64),
    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),
    #[error("block size {block} does not divide side {side}")]
    IndivisibleBlock { side: usize, block: usize },
    #[error("keep probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("window {window} does not divide side {side}")]
    IndivisibleWindow { side: usize, window: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("odd side {0} cannot be merged")]
    OddSide(usize),
    #[error("odd channel count {0} cannot be expanded")]
    OddChannels(usize),
    #[error("missing clean target for subject {0}")]
    MissingCleanTarget(String),
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("volume side {side} smaller than window {window}")]
    VolumeTooSmall { side: usize, window: usize },
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),
    #[error("masks overlap")]
    OverlappingMasks,
    #[error("background standard deviation is zero")]
    BackgroundDegenerate,
    #[error("both tissue variances are zero while means differ")]
    DegenerateContrast,
    #[error("bad phantom spec: {0}")]
    BadSpec(String),
    #[error("bad severity or trajectory request: {0}")]
    BadSeverity(String),
    #[error("bad trajectory: {0}")]
    BadTrajectory(String),
    #[error("manifest error: {0}")]
    ManifestError(String),
    #[error("checkpoint error: {0}")]
    CheckpointError(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
