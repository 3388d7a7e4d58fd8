use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
///
/// Variant names double as the machine-readable error codes the CLI prints,
/// so keep them stable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("volume is constant; cannot normalize")]
    ConstantVolume,
    #[error("invalid percentile window [{lo}, {hi}]")]
    InvalidPercentile { lo: f64, hi: f64 },
    #[error("invalid normalization parameters: hi ({hi}) must exceed lo ({lo})")]
    InvalidParams { lo: f64, hi: f64 },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("invalid dimensions {0:?}")]
    InvalidDims([usize; 3]),
    #[error("data length {got} does not match dims (expected {expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite sample in {0}")]
    NonFinite(&'static str),
    #[error("mask contains a value other than 0 or 1")]
    NonBinaryMask,

    #[error("odd dimension {0:?}; pad to even sizes first")]
    OddDimension([usize; 3]),
    #[error("channel count {0} is not a multiple of 8")]
    BadChannelCount(usize),

    #[error("invalid step count T={0}")]
    InvalidT(usize),
    #[error("invalid sigma range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("t={t} out of range [0, {max}]")]
    TOutOfRange { t: usize, max: usize },
    #[error("sigma grid must have at least 2 nonzero levels")]
    GridTooShort,

    #[error("time bin {bin} out of range (bins = {bins})")]
    BinOutOfRange { bin: usize, bins: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },
    #[error("missing mask required by objective {0}")]
    MissingMask(&'static str),
    #[error("expected 4 modalities, got {0}")]
    WrongModalityCount(usize),

    #[error("bad index {0}")]
    BadIndex(usize),
    #[error("region to inpaint is empty")]
    EmptyMask,
    #[error("reference scan is required for this variant")]
    MissingScan,
    #[error("unhealthy mask is required for this variant")]
    MissingUnhealthyMask,
    #[error("exactly one modality must be missing, found {0}")]
    WrongMissingCount(usize),
    #[error("channel contract mismatch: {0}")]
    ChannelContractMismatch(String),

    #[error("degenerate blob size: {0}")]
    DegenerateSize(String),
    #[error("placement failed after {0} retries")]
    PlacementExhausted(usize),
    #[error("mask library is empty")]
    EmptyLibrary,
    #[error("invalid placement policy: {0}")]
    InvalidPolicy(String),

    #[error("ROI is empty")]
    EmptyROI,
    #[error("window {window} larger than volume {dims:?}")]
    WindowTooLarge { window: usize, dims: [usize; 3] },
    #[error("invalid metric parameter: {0}")]
    InvalidMetricParam(String),

    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: need {need} bytes, have {have}")]
    TruncatedFile { need: usize, have: usize },
    #[error("cannot detect endianness (sizeof_hdr = {0})")]
    EndianDetectFailure(i32),
    #[error("dimension {0} does not fit in a NIfTI header")]
    DimOverflow(usize),
    #[error("missing case role {0}")]
    MissingRole(String),
    #[error("invalid case layout: {0}")]
    InvalidLayout(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, used as the `error` code in CLI output and manifests.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ConstantVolume => "ConstantVolume",
            Error::InvalidPercentile { .. } => "InvalidPercentile",
            Error::InvalidParams { .. } => "InvalidParams",
            Error::DimMismatch(..) => "DimMismatch",
            Error::InvalidDims(_) => "InvalidDims",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::NonBinaryMask => "NonBinaryMask",
            Error::OddDimension(_) => "OddDimension",
            Error::BadChannelCount(_) => "BadChannelCount",
            Error::InvalidT(_) => "InvalidT",
            Error::InvalidRange(_) => "InvalidRange",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::TOutOfRange { .. } => "TOutOfRange",
            Error::GridTooShort => "GridTooShort",
            Error::BinOutOfRange { .. } => "BinOutOfRange",
            Error::EmptyDataset => "EmptyDataset",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::MissingMask(_) => "MissingMask",
            Error::WrongModalityCount(_) => "WrongModalityCount",
            Error::BadIndex(_) => "BadIndex",
            Error::EmptyMask => "EmptyMask",
            Error::MissingScan => "MissingScan",
            Error::MissingUnhealthyMask => "MissingUnhealthyMask",
            Error::WrongMissingCount(_) => "WrongMissingCount",
            Error::ChannelContractMismatch(_) => "ChannelContractMismatch",
            Error::DegenerateSize(_) => "DegenerateSize",
            Error::PlacementExhausted(_) => "PlacementExhausted",
            Error::EmptyLibrary => "EmptyLibrary",
            Error::InvalidPolicy(_) => "InvalidPolicy",
            Error::EmptyROI => "EmptyROI",
            Error::WindowTooLarge { .. } => "WindowTooLarge",
            Error::InvalidMetricParam(_) => "InvalidMetricParam",
            Error::BadMagic(_) => "BadMagic",
            Error::UnsupportedDatatype(_) => "UnsupportedDatatype",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::EndianDetectFailure(_) => "EndianDetectFailure",
            Error::DimOverflow(_) => "DimOverflow",
            Error::MissingRole(_) => "MissingRole",
            Error::InvalidLayout(_) => "InvalidLayout",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Io(_) => "IoFailure",
            Error::Json(_) => "JsonFailure",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
