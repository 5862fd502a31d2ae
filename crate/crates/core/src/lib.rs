//! GraphTNC: unsupervised contrastive learning of joint representations of
//! multivariate time series and the dynamic graphs they evolve on.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`] and [`eeg`]: series/graph containers, windowing, persistence, EEG ingestion.
//! - [`synth`]: the HMM-driven synthetic benchmark.
//! - [`nn`], [`encoder`]: dense/GRU layers with hand-written backward passes and the
//!   graph + temporal encoder built on them.
//! - [`adf`], [`neighborhood`]: stationarity testing and positive/negative window sampling.
//! - [`training`]: discriminator, contrastive loss, Adam, gradient checking, the training loop.
//! - [`baselines`]: signal-only TNC, BYOL, SimSiam and the supervised reference.
//! - [`eval`]: linear probing, metrics and statistical comparison.
//! - [`experiment`]: the multi-split protocol tying everything together.

pub mod adf;
pub mod baselines;
pub mod data;
pub mod eeg;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod neighborhood;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
