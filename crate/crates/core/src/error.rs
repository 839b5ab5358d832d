use thiserror::Error;

use crate::precision::Precision;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid angle range [{start}, {end})")]
    InvalidAngleRange { start: f64, end: f64 },

    #[error("index out of range: {what} = {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown phantom kind `{0}`")]
    UnknownPhantom(String),

    #[error("too many parts: {parts} requested for {available} items")]
    TooManyParts { parts: usize, available: usize },

    #[error("subdomains do not partition the domain: {0}")]
    NotAPartition(String),

    #[error("stage-local index {index} does not fit in 16 bits; the stage must be split")]
    IndexOverflow { index: usize },

    #[error("stage capacity of {capacity} bytes cannot hold a single element ({needed} bytes)")]
    CapacityTooSmall { capacity: usize, needed: usize },

    #[error("fusing factor {got} does not match staged layout built for {expected}")]
    FusingMismatch { expected: usize, got: usize },

    #[error("fusing factor {0} outside 1..=50")]
    InvalidFusingFactor(usize),

    #[error("topology cannot host {requested} processes ({available} GPUs)")]
    Oversubscribed { requested: usize, available: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("missing contribution from process {process} for element {element}")]
    MissingContributor { process: usize, element: usize },

    #[error("solver diverged at iteration {iteration} in {precision} mode: {detail}")]
    Diverged {
        iteration: usize,
        precision: Precision,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
