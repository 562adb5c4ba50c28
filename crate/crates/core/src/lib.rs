pub mod accounting;
pub mod build;
pub mod checksum;
pub mod cli;
pub mod config;
pub mod deploy;
pub mod error;
pub mod executor;
pub mod model;
pub mod notify;
pub mod orchestrator;
pub mod packaging;
pub mod report;
pub mod stamp;
pub mod store;

pub use error::{Error, ModelError};
