//! Federated learning simulation with Local Superior Soups local training.

pub mod analysis;
pub mod data;
pub mod error;
pub mod federation;
pub mod local;
pub mod model;
pub mod params;
pub mod seed;

pub use error::{Error, Result};
pub use params::ParamVector;
