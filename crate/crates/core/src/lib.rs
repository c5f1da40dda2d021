//! Compressive spectral image fusion from dual-arm 3D-CASSI measurements.
//!
//! The crate provides the acquisition model ([`cassi`]), a classical linearized-ADMM fusion
//! solver ([`solver`]), the unrolled LADMM network ([`net`]) with its hand-written reverse-mode
//! training ([`training`]), the block compressive-sensing variant ([`cs`]), quality metrics
//! ([`metrics`]) and the reproducible command pipeline used by the CLI ([`pipeline`]).

pub mod cassi;
pub mod cs;
pub mod cube_io;
pub mod error;
pub mod metrics;
pub mod net;
pub mod operator;
pub mod pipeline;
pub mod solver;
pub mod synthetic;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
