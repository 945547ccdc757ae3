//! Config-hash stamping of run artifacts.
//!
//! CSV files open with a `# config_hash=<hex>` line, JSON documents carry a
//! top-level `config_hash` field, PPM images hold it as a header comment, and
//! binary files get a `<file>.meta.json` sidecar that also records the file's
//! SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

const CSV_PREFIX: &str = "# config_hash=";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    hash: String,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config_hash: String,
    sha256: String,
    bytes: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

impl Stamp {
    pub fn new(hash: impl Into<String>) -> Self {
        Self { hash: hash.into() }
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Comment text for PPM headers and manifests.
    pub fn comment(&self) -> String {
        format!("config_hash={}", self.hash)
    }

    fn check(&self, path: &Path, found: &str) -> Result<(), CliError> {
        if found != self.hash {
            return Err(CliError::HashMismatch {
                path: path.to_path_buf(),
                expected: self.hash.clone(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path, body: &str) -> Result<(), CliError> {
        write(path, format!("{CSV_PREFIX}{}\n{body}", self.hash).as_bytes())
    }

    /// Checks the stamp and returns the CSV without its stamp line.
    pub fn read_csv(&self, path: &Path) -> Result<String, CliError> {
        let text = String::from_utf8(read(path)?)
            .map_err(|_| CliError::Schema(format!("{} is not UTF-8", path.display())))?;
        let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
        let found = first
            .strip_prefix(CSV_PREFIX)
            .ok_or_else(|| CliError::Schema(format!("{} has no config hash line", path.display())))?;
        self.check(path, found)?;
        Ok(rest.to_string())
    }

    /// Checks the hash comment atop a dataset manifest.
    pub fn check_manifest(&self, path: &Path) -> Result<(), CliError> {
        self.read_csv(path).map(|_| ())
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, body: &T) -> Result<(), CliError> {
        let doc = Stamped {
            config_hash: &self.hash,
            body,
        };
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Failed(e.to_string()))?;
        text.push('\n');
        write(path, text.as_bytes())
    }

    /// Checks the stamp and returns the document without its hash field.
    pub fn read_json(&self, path: &Path) -> Result<serde_json::Value, CliError> {
        let mut doc: serde_json::Value = serde_json::from_slice(&read(path)?)
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        let found = doc
            .as_object_mut()
            .and_then(|o| o.remove("config_hash"))
            .and_then(|v| v.as_str().map(str::to_string))
            .ok_or_else(|| CliError::Schema(format!("{} has no config_hash field", path.display())))?;
        self.check(path, &found)?;
        Ok(doc)
    }

    pub fn read_json_as<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T, CliError> {
        serde_json::from_value(self.read_json(path)?).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
    }

    /// Writes `bytes` and its sidecar.
    pub fn write_binary(&self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write(path, bytes)?;
        let meta = Sidecar {
            config_hash: self.hash.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        };
        let mut text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
        text.push('\n');
        write(&sidecar_path(path), text.as_bytes())
    }

    /// Reads a binary artifact after checking its sidecar's hash and checksum.
    pub fn read_binary(&self, path: &Path) -> Result<Vec<u8>, CliError> {
        let meta_path = sidecar_path(path);
        let meta: Sidecar = serde_json::from_slice(&read(&meta_path)?)
            .map_err(|e| CliError::Schema(format!("{}: {e}", meta_path.display())))?;
        self.check(path, &meta.config_hash)?;
        let bytes = read(path)?;
        if sha256_hex(&bytes) != meta.sha256 {
            return Err(CliError::Schema(format!(
                "{} does not match the checksum in its sidecar",
                path.display()
            )));
        }
        Ok(bytes)
    }
}
