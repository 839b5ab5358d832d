//! Parallel-beam iterative X-ray CT reconstruction at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: scan geometry, Siddon ray tracing, system matrix, phantoms
//!   and simulated measurements.
//! - [`hilbert`]: pseudo-Hilbert tile ordering, subdomain decomposition and
//!   data-access footprints.
//! - [`matrixstore`]: per-process matrix blocks, transposition, 4-byte entry
//!   packing, multi-stage buffers and adaptive normalization.
//! - [`engine`]: fused SpMM projection/backprojection kernels, a naive
//!   reference, partial-result reduction and FLOP/byte counters.
//! - [`comm`]: simulated multi-GPU topology, placement, direct and three-level
//!   hierarchical communication plans and an overlap makespan model.
//! - [`solver`]: CGLS with precision policy and early termination.
//! - [`pipeline`]: the partitioned operator that ties everything together,
//!   plus the memory model used for automatic partitioning.

pub mod comm;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod hilbert;
pub mod matrixstore;
pub mod pipeline;
pub mod precision;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
pub use precision::Precision;
pub use sparse::CsrMatrix;
