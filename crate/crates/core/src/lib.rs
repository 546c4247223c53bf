//! Bifold multitask pedestrian behavior prediction at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 arrays with reverse-mode autodiff and a
//!   finite-difference gradient checker;
//! - [`nn`]: dense/embedding/LSTM layers, the shared convolution stack,
//!   the interaction attention unit, parameter storage and serialization;
//! - [`data`]: grid classes, category masks, sequence sampling, the
//!   synthetic scene generator and the on-disk dataset format;
//! - [`model`]: the assembled predictor (independent and joint encoders,
//!   categorical interaction module, independent and joint decoders,
//!   score fusion) under an ablation-aware configuration;
//! - [`objective`]: multitask losses, RMSProp, the training loop;
//! - [`eval`]: trajectory and classification metrics plus reports.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;

pub use error::{Error, Result};
