use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const TOOL: &str = "funquad";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance block attached to every artifact.
#[derive(Debug, Clone)]
pub struct Metadata {
    pub command: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub extra: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new<C: Serialize>(command: &'static str, config: &C, seed: u64) -> Self {
        let bytes = serde_json::to_vec(config).unwrap_or_default();
        let digest = Sha256::digest(&bytes);
        let config_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        Metadata {
            command,
            config_sha256,
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = self.extra.clone();
        m.insert("tool".into(), TOOL.into());
        m.insert("version".into(), VERSION.into());
        m.insert("command".into(), self.command.into());
        m.insert("config_sha256".into(), self.config_sha256.clone());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    /// `# key: value` lines placed above a CSV header.
    pub fn csv_preamble(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
    }
}

pub struct OutDir {
    dir: PathBuf,
    meta: Metadata,
}

impl OutDir {
    pub fn create(dir: &Path, meta: Metadata) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn meta(&self) -> &Metadata {
        &self.meta
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    /// Write a CSV produced by `body` behind the metadata preamble.
    pub fn csv<F>(&self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
    {
        let mut buf = self.meta.csv_preamble().into_bytes();
        body(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input {
            kind: "serialize",
            message: e.to_string(),
        })?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_content_only() {
        let a = Metadata::new("fit", &serde_json::json!({"lambda": 1.0}), 3);
        let b = Metadata::new("fit", &serde_json::json!({"lambda": 1.0}), 3);
        let c = Metadata::new("fit", &serde_json::json!({"lambda": 2.0}), 3);
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
    }

    #[test]
    fn preamble_lines_are_comments() {
        let m = Metadata::new("smooth", &1u8, 9).with("roughness", 0.5);
        let text = m.csv_preamble();
        assert!(text.lines().all(|l| l.starts_with("# ")));
        assert!(text.contains("# seed: 9\n"));
        assert!(text.contains("# roughness: 0.5\n"));
        assert!(text.contains(&format!("# version: {VERSION}\n")));
    }
}
