//! Source-free domain adaptation for time series via temporal imputation
//! (MAPU) and evidential uncertainty (E-MAPU).
//!
//! The crate is organized around a small f64 autodiff core (`diffmath`), the
//! four networks (`nets`), temporal block masking (`masking`), classical and
//! evidential objectives (`losses`, `evidential`), synthetic shifted datasets
//! (`data`), evaluation metrics (`metrics`), and the training procedures
//! (`pipeline`). `config` and `cli` drive end-to-end experiments.

pub mod cli;
pub mod config;
pub mod data;
pub mod diffmath;
pub mod evidential;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod rng;
