use std::fmt;

use gelcal_core::{Error, ErrorCategory};
use serde::Serialize;

/// A failure reported as one JSON object on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub error: String,
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            error: "UsageError".into(),
            category: "usage",
            message: message.into(),
        }
    }

    pub fn data(kind: &str, message: impl Into<String>) -> Self {
        Self {
            error: kind.into(),
            category: "data",
            message: message.into(),
        }
    }

    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    /// 1 usage or configuration, 2 numerical failure, 3 data error.
    pub fn exit_code(&self) -> i32 {
        match self.category {
            "usage" => 1,
            "numerical" => 2,
            _ => 3,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match e.category() {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Data => "data",
        };
        Self {
            error: e.kind().into(),
            category,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data("Io", e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.error, self.message)
    }
}
