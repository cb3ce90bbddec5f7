//! Command-line pipeline and HTTP service around `drugsurv_core`.

pub mod cli;
pub mod error;
pub mod service;

pub use cli::run;
pub use error::CliError;
