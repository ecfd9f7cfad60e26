//! Run-directory plumbing: every command writes its outputs under one run
//! directory and appends one manifest row per artifact, stamped with the
//! effective config hash and the flag overrides that produced it.
//!
//! `manifest.ndjson` is append-only (one JSON object per line) so
//! concurrent commands against the same run directory cannot tear it.
//! Failures append a machine-readable record to `errors.ndjson` and print
//! the same JSON to stderr.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use atelier_core::util::sha256_hex;

use crate::config::{Overrides, RunConfig};
use crate::CliError;

pub const MANIFEST_FORMAT: &str = "artifact-manifest/1";
pub const ERROR_FORMAT: &str = "error-record/1";

/// One produced artifact: path relative to the run dir, content hash, and
/// the provenance stamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRow {
    pub format: String,
    pub command: String,
    pub name: String,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub config_hash: String,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub format: String,
    pub command: String,
    pub kind: String,
    pub message: String,
    pub config_hash: Option<String>,
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    config_hash: String,
    overrides: Vec<String>,
    /// Artifacts written by this command, in order.
    pub written: Vec<ArtifactRow>,
}

impl RunDir {
    /// Opens (creating if needed) the run directory and snapshots the
    /// effective config into it as `config-<hash12>.toml`.
    pub fn open(
        cfg: &RunConfig,
        overrides: &Overrides,
        command: &str,
    ) -> Result<Self, CliError> {
        let root = cfg.paths.run_dir.clone();
        std::fs::create_dir_all(&root)?;
        let hash = cfg.content_hash();
        let snapshot = root.join(format!("config-{}.toml", &hash[..12]));
        if !snapshot.exists() {
            let tmp = snapshot.with_extension(format!("tmp-{}", std::process::id()));
            std::fs::write(&tmp, cfg.to_toml())?;
            std::fs::rename(&tmp, &snapshot)?;
        }
        Ok(RunDir {
            root,
            command: command.to_string(),
            config_hash: hash,
            overrides: overrides.0.clone(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Writes one artifact under the run dir, verifies it back byte-exactly,
    /// and appends its manifest row. Returns the absolute path.
    pub fn put(&mut self, rel: &str, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        // Validate: read back and compare hashes.
        let back = std::fs::read(&path)?;
        let digest = sha256_hex(&back);
        if digest != sha256_hex(bytes) {
            return Err(CliError::internal(format!(
                "artifact {} failed write-back verification",
                path.display()
            )));
        }
        let row = ArtifactRow {
            format: MANIFEST_FORMAT.to_string(),
            command: self.command.clone(),
            name: name.to_string(),
            path: rel.to_string(),
            sha256: digest,
            bytes: back.len() as u64,
            config_hash: self.config_hash.clone(),
            overrides: self.overrides.clone(),
        };
        let mut line = serde_json::to_vec(&row)?;
        line.push(b'\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("manifest.ndjson"))?;
        f.write_all(&line)?;
        f.flush()?;
        self.written.push(row);
        Ok(path)
    }

    /// Serializes a JSON artifact with the config hash stamped into the
    /// document itself, writes it, and appends its manifest row.
    pub fn put_json<T: Serialize>(
        &mut self,
        rel: &str,
        name: &str,
        value: &T,
    ) -> Result<PathBuf, CliError> {
        let mut doc = serde_json::to_value(value)?;
        match doc.as_object_mut() {
            Some(map) => {
                map.insert("config_hash".into(), self.config_hash.clone().into());
            }
            None => {
                doc = serde_json::json!({
                    "config_hash": self.config_hash,
                    "value": doc,
                });
            }
        }
        let bytes = serde_json::to_vec_pretty(&doc)?;
        // Validate that the artifact parses back.
        let _: serde_json::Value = serde_json::from_slice(&bytes)?;
        self.put(rel, name, &bytes)
    }

    /// Reads the full manifest of this run directory.
    pub fn manifest(root: &Path) -> Result<Vec<ArtifactRow>, CliError> {
        let path = root.join("manifest.ndjson");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let bytes = std::fs::read(&path)?;
        let mut rows = Vec::new();
        for line in bytes.split(|&b| b == b'\n') {
            if line.is_empty() {
                continue;
            }
            rows.push(serde_json::from_slice(line)?);
        }
        Ok(rows)
    }
}

/// Appends a machine-readable error record to `errors.ndjson` under the run
/// dir (when one is known) and prints the same JSON object to stderr.
pub fn emit_error(run_dir: Option<&Path>, rec: &ErrorRecord) {
    let json = serde_json::to_string(rec).unwrap_or_else(|_| {
        format!("{{\"format\":\"{ERROR_FORMAT}\",\"kind\":\"internal\"}}")
    });
    if let Some(root) = run_dir {
        if std::fs::create_dir_all(root).is_ok() {
            if let Ok(mut f) = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(root.join("errors.ndjson"))
            {
                let _ = writeln!(f, "{json}");
            }
        }
    }
    eprintln!("{json}");
}
