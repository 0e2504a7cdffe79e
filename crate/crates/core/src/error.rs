use thiserror::Error;

use crate::voltage::PageType;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no read references select the {0:?} page")]
    EmptyReferences(PageType),
    #[error("read reference voltages must be strictly ascending")]
    UnsortedReferences,
    #[error("degenerate distributions: no pdf intersection inside ({0}, {1})")]
    Degenerate(f64, f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("{axis} key {key} lies beyond the calibrated range")]
    OutOfRange { axis: &'static str, key: f64 },
    #[error("calibration table: {0}")]
    Calibration(String),
    #[error("block worn out after {0} P/E cycles")]
    WornOut(u32),
    #[error("program sequence violation: expected {expected}, got {got}")]
    Sequence { expected: String, got: String },
    #[error("page already programmed: {0}")]
    Reprogram(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid block state: {0}")]
    State(String),
    #[error("disparity search failed: {0}")]
    Disparity(String),
    #[error("LDPC construction failed after {0} attempts")]
    Construction(usize),
    #[error("capacity exhausted: {0}")]
    Capacity(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
