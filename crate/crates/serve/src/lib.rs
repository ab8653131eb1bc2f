//! Command-line driver and HTTP service for the CRS outcome toolkit.

pub mod cli;
pub mod config;
pub mod drill;
pub mod error;
pub mod http;
pub mod registry;
pub mod store;
pub mod workspace;

pub use config::Config;
pub use error::{ErrorRecord, Result, ServeError};
