//! MU-MIMO link-level simulation and detection engine.
//!
//! - [`channel`]: constellations, Rayleigh channels, noise and SNR bookkeeping
//! - [`detectors`]: MMSE, exhaustive ML and classical EP baselines
//! - [`gepnet`]: GEPNet inference with a learned or QAM constellation
//! - [`weights`]: the `GEPW` weight bundle format
//! - [`sweep`]: Monte Carlo SER sweeps
//! - [`complexity`]: multiplication counts
//! - [`service`]: request types and handlers shared by the server and CLI

pub mod channel;
pub mod complexity;
pub mod detectors;
pub mod ep;
pub mod error;
pub mod gepnet;
pub mod nn;
pub mod service;
pub mod sweep;
pub mod weights;

pub use error::{Error, Result};
