//! Core library of the Atelier framework: conditional diffusion model,
//! copyright plug-ins (low-rank adapters), plug-in extraction and merging,
//! distribution metrics, and the plug-in registry.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod merge;
pub mod metrics;
pub mod training;
pub mod model;
pub mod registry;
pub mod util;
pub mod vocab;
pub mod weights;

pub use error::{CoreError, Result};
