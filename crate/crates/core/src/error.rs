use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("value {0} is not representable as binary16")]
    HalfOverflow(f32),
    #[error("NaN bit pattern {0:#06x} is not a valid binary16 value")]
    HalfNan(u16),
    #[error("unsupported bit width N={0}")]
    UnsupportedBits(u8),
    #[error("index {index} out of range for N={n_bits}")]
    IndexOutOfRange { index: u32, n_bits: u8 },
    #[error("corrupt packed word {word} (reserve or padding bits set)")]
    CorruptPacking { word: usize },
    #[error("outlier position ({row}, {col}) outside {rows}x{cols} matrix")]
    OutlierOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("infeasible distribution profile `{name}`: {reason}")]
    InfeasibleProfile { name: String, reason: String },
    #[error("unknown distribution profile `{0}`")]
    UnknownProfile(String),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unexpected end of data while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch in layer {layer}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { layer: usize, stored: u32, computed: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
