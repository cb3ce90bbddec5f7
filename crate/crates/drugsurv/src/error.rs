use std::fmt;

use drugsurv_core::cohort::CohortError;
use drugsurv_core::evaluate::EvalError;
use drugsurv_core::learn::LearnError;
use drugsurv_core::prescribe::PrescribeError;
use drugsurv_core::preprocess::PreprocessError;
use serde::Serialize;

/// A failed command, reported as one JSON line on stderr.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub error: &'static str,
    pub module: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(module: &'static str, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            error,
            module,
            message: message.into(),
        }
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}: {}", self.module, self.error, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CohortError> for CliError {
    fn from(e: CohortError) -> Self {
        Self::new("cohort", e.name(), e.to_string())
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        Self::new("preprocess", e.name(), e.to_string())
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        Self::new("learn", e.name(), e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let module = match &e {
            EvalError::Learn(_) => "learn",
            EvalError::Preprocess(_) => "preprocess",
            _ => "evaluate",
        };
        Self::new(module, e.name(), e.to_string())
    }
}

impl From<PrescribeError> for CliError {
    fn from(e: PrescribeError) -> Self {
        let module = match &e {
            PrescribeError::Learn(_) => "learn",
            PrescribeError::Preprocess(_) => "preprocess",
            _ => "prescribe",
        };
        Self::new(module, e.name(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("serve", "Io", e.to_string())
    }
}
