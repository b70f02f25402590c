pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod backbone;
pub mod params;
pub mod block;
pub mod prototypes;
pub mod model;
pub mod objectives;
pub mod data;
pub mod eval;
pub mod trainer;
pub mod config;
pub mod trace;
pub mod ablation;
pub mod manifest;
