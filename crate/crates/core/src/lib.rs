pub mod adversary;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod labeling;
pub mod orchestrator;
pub mod perception;
pub mod sac;
pub mod toyenv;

pub use error::{Error, Result};
