//! Massive-MIMO UL/DL channel calibration: channel simulation, a learned
//! calibrator, linear baselines and Monte Carlo experiment drivers.

pub mod baselines;
pub mod calinet;
pub mod config;
pub mod channel;
pub mod error;
pub mod formats;
pub mod harness;
pub mod numerics;
pub mod report;

pub use error::{CalibError, Result};
pub use numerics::{CMatrix, SimRng, C64};
