//! Two-stage HDR video reconstruction from alternating-exposure LDR frames.
pub mod coarseflow;
pub mod error;
pub mod exposure;
pub mod metrics;
pub mod motionphys;
pub mod nnkit;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod tensorio;
pub mod trainer;
pub use error::{Error, Result};
