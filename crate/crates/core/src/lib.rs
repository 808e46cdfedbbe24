//! Numeric laboratory for context-augmented attention: the exact α/β
//! decomposition of attention over demonstration slots, learnable low-rank
//! virtual key-value adapters built on it, LoRA and linear-shift baselines,
//! a tiny decoder-only transformer with hand-written gradients, and synthetic
//! in-context symbol-mapping tasks.

pub mod adapters;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod numcore;
pub mod optim;
pub mod params;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
