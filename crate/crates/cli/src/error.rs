use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Input { kind: &'static str, message: String },

    #[error("{message}")]
    Numerical { kind: &'static str, message: String },
}

#[derive(Serialize)]
struct ErrorDocument<'a> {
    kind: &'a str,
    message: String,
    exit_code: i32,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Input {
            kind: "config",
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input {
            kind: "io",
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Input { kind, .. } | CliError::Numerical { kind, .. } => kind,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input { .. } => EXIT_INPUT,
            CliError::Numerical { .. } => EXIT_NUMERICAL,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorDocument {
            kind: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        })
        .unwrap_or_else(|_| format!("{{\"kind\":\"{}\"}}", self.kind()))
    }
}

impl From<funquad::Error> for CliError {
    fn from(e: funquad::Error) -> Self {
        let kind = e.kind();
        let message = e.to_string();
        if e.is_numerical() {
            CliError::Numerical { kind, message }
        } else {
            CliError::Input { kind, message }
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input {
            kind: "csv",
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let input: CliError = funquad::Error::EmptyDataset.into();
        assert_eq!(input.exit_code(), EXIT_INPUT);
        assert_eq!(input.kind(), "empty_dataset");
        let num: CliError = funquad::Error::IllConditioned { min_eigenvalue: -1.0 }.into();
        assert_eq!(num.exit_code(), EXIT_NUMERICAL);
        let v: serde_json::Value = serde_json::from_str(&input.to_json()).unwrap();
        assert_eq!(v["kind"], "empty_dataset");
        assert_eq!(v["exit_code"], 2);
    }
}
