//! Deterministic simulator for adapter-based federated fine-tuning.

pub mod adapter;
pub mod cache;
pub mod checkpoint;
pub mod configurator;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod fed;
pub mod model;
pub mod nn;
pub mod payload;
pub mod pretrain;
pub mod rng;
pub mod session;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
