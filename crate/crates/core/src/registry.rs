//! The authorization plumbing: a content-addressed plug-in pool with
//! manifests, an enrolled-base list, an append-only usage ledger, and
//! proportional attribution reports.
//!
//! On-disk layout under the registry root:
//!
//! ```text
//! format.json          version marker {"format": "registry/1"}
//! blobs/<hash>         archive bytes (plug-ins and enrolled bases)
//! manifests/<id>.json  one PluginManifest per registered plug-in
//! bases/<hash>.json    one enrollment record per base
//! ledger.ndjson        one UsageRecord JSON object per line, append-only
//! ```
//!
//! Time is a logical sequence number shared by manifests, enrollments, and
//! ledger rows — a single per-registry counter, so replays are
//! deterministic and no wall clock leaks into artifacts.
//!
//! Writes (register, enroll, record_use) are meant to be serialized through
//! a single writer per registry; concurrent readers are always safe. Blob
//! and manifest writes go through a temp-file rename so a crashed writer
//! never leaves a torn file, and ledger rows are single atomic appends.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::lora::CreationKind;
use crate::util::sha256_hex;
use crate::weights::peek_archive;

pub const REGISTRY_FORMAT: &str = "registry/1";
pub const MANIFEST_FORMAT: &str = "plugin-manifest/1";
pub const BASE_FORMAT: &str = "base-enrollment/1";
pub const USAGE_FORMAT: &str = "usage/1";

/// How a plug-in came to exist, as recorded in its manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreationOp {
    Addition,
    Extraction,
    Combination,
}

impl From<&CreationKind> for CreationOp {
    fn from(kind: &CreationKind) -> Self {
        match kind {
            CreationKind::Addition => CreationOp::Addition,
            CreationKind::Extraction => CreationOp::Extraction,
            CreationKind::Merge { .. } => CreationOp::Combination,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginManifest {
    pub format: String,
    /// Content hash of the archive bytes; recomputable by anyone.
    pub plugin_id: String,
    pub owner_id: String,
    pub concept: String,
    pub base_model_hash: String,
    pub creation_op: CreationOp,
    /// Parent plug-in ids; non-empty only for combinations.
    pub parents: Vec<String>,
    pub rank: usize,
    /// Logical registration time (per-registry sequence number).
    pub created_at: u64,
    pub license_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrolledBase {
    pub format: String,
    pub base_hash: String,
    pub label: String,
    /// Logical enrollment time.
    pub enrolled_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsageRecord {
    pub format: String,
    /// Logical time of the request; defines report periods.
    pub at: u64,
    pub request_id: String,
    pub user_id: String,
    pub plugin_ids: Vec<String>,
    pub prompt: String,
    pub seed: u64,
}

/// Caller-supplied fields for [`Registry::register`]; everything else in
/// the manifest is derived from the archive itself so the two can never
/// disagree.
#[derive(Debug, Clone, Default)]
pub struct RegisterFields {
    pub owner_id: String,
    pub license_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnerShare {
    pub uses: u64,
    pub share: f64,
}

/// Proportional attribution over a period: each (request, distinct plug-in)
/// pair counts once toward the plug-in owner's tally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStatement {
    /// Inclusive logical-time range; `None` = the whole ledger.
    pub period: Option<(u64, u64)>,
    pub total_uses: u64,
    pub owners: BTreeMap<String, OwnerShare>,
}

/// Minimal JSON view of a plug-in archive's metadata (dtype-agnostic).
#[derive(Debug, Deserialize)]
struct ArchiveMetaView {
    concept: String,
    base_model_hash: String,
    rank: usize,
    creation: CreationKind,
}

pub struct Registry {
    root: PathBuf,
    manifests: BTreeMap<String, PluginManifest>,
    bases: BTreeMap<String, EnrolledBase>,
    seen_requests: BTreeSet<String>,
    /// Byte offset up to which the ledger has been folded into memory.
    ledger_offset: u64,
    next_seq: u64,
}

impl Registry {
    /// Opens (creating if needed) a registry rooted at `root` and loads all
    /// durable state from disk.
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("blobs"))?;
        std::fs::create_dir_all(root.join("manifests"))?;
        std::fs::create_dir_all(root.join("bases"))?;
        let fmt_path = root.join("format.json");
        if fmt_path.exists() {
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&fmt_path)?)?;
            if v.get("format").and_then(|f| f.as_str()) != Some(REGISTRY_FORMAT) {
                return Err(CoreError::RegistryCorrupt(format!(
                    "unsupported registry format in {}",
                    fmt_path.display()
                )));
            }
        } else {
            std::fs::write(&fmt_path, serde_json::to_vec_pretty(&serde_json::json!({
                "format": REGISTRY_FORMAT,
            }))?)?;
        }

        let mut reg = Registry {
            root: root.to_path_buf(),
            manifests: BTreeMap::new(),
            bases: BTreeMap::new(),
            seen_requests: BTreeSet::new(),
            ledger_offset: 0,
            next_seq: 0,
        };
        for entry in std::fs::read_dir(root.join("manifests"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let m: PluginManifest = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| CoreError::RegistryCorrupt(format!("{}: {e}", path.display())))?;
            if m.format != MANIFEST_FORMAT {
                return Err(CoreError::RegistryCorrupt(format!(
                    "manifest {} has format `{}`",
                    path.display(),
                    m.format
                )));
            }
            reg.next_seq = reg.next_seq.max(m.created_at + 1);
            reg.manifests.insert(m.plugin_id.clone(), m);
        }
        for entry in std::fs::read_dir(root.join("bases"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let b: EnrolledBase = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| CoreError::RegistryCorrupt(format!("{}: {e}", path.display())))?;
            if b.format != BASE_FORMAT {
                return Err(CoreError::RegistryCorrupt(format!(
                    "enrollment {} has format `{}`",
                    path.display(),
                    b.format
                )));
            }
            reg.next_seq = reg.next_seq.max(b.enrolled_at + 1);
            reg.bases.insert(b.base_hash.clone(), b);
        }
        reg.refresh_ledger()?;
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.ndjson")
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join("blobs").join(hash)
    }

    fn manifest_path(&self, id: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{id}.json"))
    }

    /// Folds any ledger rows appended since the last refresh (possibly by
    /// another writer) into the in-memory request-id set and clock.
    fn refresh_ledger(&mut self) -> Result<()> {
        let path = self.ledger_path();
        if !path.exists() {
            return Ok(());
        }
        let bytes = std::fs::read(&path)?;
        if (bytes.len() as u64) < self.ledger_offset {
            return Err(CoreError::RegistryCorrupt("ledger shrank on disk".into()));
        }
        for line in bytes[self.ledger_offset as usize..].split(|&b| b == b'\n') {
            if line.is_empty() {
                continue;
            }
            let rec: UsageRecord = serde_json::from_slice(line)
                .map_err(|e| CoreError::RegistryCorrupt(format!("ledger row: {e}")))?;
            self.next_seq = self.next_seq.max(rec.at + 1);
            self.seen_requests.insert(rec.request_id);
        }
        self.ledger_offset = bytes.len() as u64;
        Ok(())
    }

    fn write_blob(&self, hash: &str, bytes: &[u8]) -> Result<()> {
        let path = self.blob_path(hash);
        if path.exists() {
            return Ok(());
        }
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    // -----------------------------------------------------------------
    // Bases
    // -----------------------------------------------------------------

    /// Enrolls a base-model archive; idempotent on identical bytes.
    /// Returns the base's content hash.
    pub fn enroll_base(&mut self, archive: &[u8], label: &str) -> Result<String> {
        let info = peek_archive(archive)?;
        if info.kind != "model" {
            return Err(CoreError::Archive(format!(
                "expected a model archive, got kind `{}`",
                info.kind
            )));
        }
        let hash = sha256_hex(archive);
        if let Some(existing) = self.bases.get(&hash) {
            return Ok(existing.base_hash.clone());
        }
        self.write_blob(&hash, archive)?;
        let rec = EnrolledBase {
            format: BASE_FORMAT.to_string(),
            base_hash: hash.clone(),
            label: label.to_string(),
            enrolled_at: self.next_seq,
        };
        let path = self.root.join("bases").join(format!("{hash}.json"));
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&rec)?)?;
        std::fs::rename(&tmp, &path)?;
        self.next_seq += 1;
        self.bases.insert(hash.clone(), rec);
        Ok(hash)
    }

    pub fn is_base_enrolled(&self, base_hash: &str) -> bool {
        self.bases.contains_key(base_hash)
    }

    pub fn enrolled_bases(&self) -> impl Iterator<Item = &EnrolledBase> {
        self.bases.values()
    }

    /// Fetches an enrolled base archive, verifying its content hash.
    pub fn fetch_base(&self, base_hash: &str) -> Result<(Vec<u8>, EnrolledBase)> {
        let rec = self
            .bases
            .get(base_hash)
            .ok_or_else(|| CoreError::NotRegistered(format!("base {base_hash}")))?;
        let bytes = std::fs::read(self.blob_path(base_hash))
            .map_err(|_| CoreError::NotRegistered(format!("base blob {base_hash}")))?;
        let actual = sha256_hex(&bytes);
        if actual != base_hash {
            return Err(CoreError::HashMismatch { expected: base_hash.to_string(), actual });
        }
        Ok((bytes, rec.clone()))
    }

    // -----------------------------------------------------------------
    // Plug-ins
    // -----------------------------------------------------------------

    /// Registers a plug-in archive. The manifest's concept, base hash,
    /// rank, creation op, and parents are read out of the archive itself;
    /// `fields` contributes only ownership and licensing. Idempotent:
    /// identical bytes return the same id without growing the store, but a
    /// different owner claiming the same bytes is a conflict.
    pub fn register(&mut self, archive: &[u8], fields: &RegisterFields) -> Result<String> {
        let info = peek_archive(archive)?;
        if info.kind != "plugin" {
            return Err(CoreError::Archive(format!(
                "expected a plugin archive, got kind `{}`",
                info.kind
            )));
        }
        let meta: ArchiveMetaView = serde_json::from_value(info.meta)?;
        let id = sha256_hex(archive);
        if let Some(existing) = self.manifests.get(&id) {
            if existing.owner_id != fields.owner_id {
                return Err(CoreError::OwnerConflict {
                    id,
                    owner: existing.owner_id.clone(),
                });
            }
            return Ok(id);
        }
        if !self.is_base_enrolled(&meta.base_model_hash) {
            return Err(CoreError::NotRegistered(format!(
                "base {} (enroll it before registering plug-ins against it)",
                meta.base_model_hash
            )));
        }
        let (creation_op, parents) = match &meta.creation {
            CreationKind::Merge { parents, .. } => (CreationOp::Combination, parents.clone()),
            other => (CreationOp::from(other), Vec::new()),
        };
        if creation_op == CreationOp::Combination {
            if parents.len() < 2 {
                return Err(CoreError::InvalidHyperparameter(format!(
                    "combination manifest lists {} parent(s); at least 2 required",
                    parents.len()
                )));
            }
            for p in &parents {
                if !self.manifests.contains_key(p) {
                    return Err(CoreError::NotRegistered(format!("parent plug-in {p}")));
                }
            }
        }
        self.write_blob(&id, archive)?;
        let manifest = PluginManifest {
            format: MANIFEST_FORMAT.to_string(),
            plugin_id: id.clone(),
            owner_id: fields.owner_id.clone(),
            concept: meta.concept,
            base_model_hash: meta.base_model_hash,
            creation_op,
            parents,
            rank: meta.rank,
            created_at: self.next_seq,
            license_note: fields.license_note.clone(),
        };
        let path = self.manifest_path(&id);
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        std::fs::rename(&tmp, &path)?;
        self.next_seq += 1;
        self.manifests.insert(id.clone(), manifest);
        Ok(id)
    }

    /// Returns the archive bytes and manifest, verifying the content hash
    /// on every fetch.
    pub fn fetch(&self, plugin_id: &str) -> Result<(Vec<u8>, PluginManifest)> {
        let manifest = self
            .manifests
            .get(plugin_id)
            .ok_or_else(|| CoreError::NotRegistered(format!("plug-in {plugin_id}")))?;
        let bytes = std::fs::read(self.blob_path(plugin_id))
            .map_err(|_| CoreError::NotRegistered(format!("blob {plugin_id}")))?;
        let actual = sha256_hex(&bytes);
        if actual != plugin_id {
            return Err(CoreError::HashMismatch { expected: plugin_id.to_string(), actual });
        }
        Ok((bytes, manifest.clone()))
    }

    pub fn manifest(&self, plugin_id: &str) -> Option<&PluginManifest> {
        self.manifests.get(plugin_id)
    }

    pub fn manifests(&self) -> impl Iterator<Item = &PluginManifest> {
        self.manifests.values()
    }

    /// True iff the plug-in's manifest targets exactly this base hash.
    pub fn verify_compatibility(&self, plugin_id: &str, base_hash: &str) -> Result<bool> {
        let manifest = self
            .manifests
            .get(plugin_id)
            .ok_or_else(|| CoreError::NotRegistered(format!("plug-in {plugin_id}")))?;
        Ok(manifest.base_model_hash == base_hash)
    }

    // -----------------------------------------------------------------
    // Ledger
    // -----------------------------------------------------------------

    /// Appends one usage row; exactly-once per `request_id`.
    pub fn record_use(
        &mut self,
        request_id: &str,
        user_id: &str,
        plugin_ids: &[String],
        prompt: &str,
        seed: u64,
    ) -> Result<UsageRecord> {
        if plugin_ids.is_empty() {
            return Err(CoreError::InvalidHyperparameter(
                "a usage record must name at least one plug-in".into(),
            ));
        }
        for id in plugin_ids {
            if !self.manifests.contains_key(id) {
                return Err(CoreError::NotRegistered(format!("plug-in {id}")));
            }
        }
        // Pick up rows appended by other writers before judging freshness.
        self.refresh_ledger()?;
        if self.seen_requests.contains(request_id) {
            return Err(CoreError::DuplicateRequest(request_id.to_string()));
        }
        let rec = UsageRecord {
            format: USAGE_FORMAT.to_string(),
            at: self.next_seq,
            request_id: request_id.to_string(),
            user_id: user_id.to_string(),
            plugin_ids: plugin_ids.to_vec(),
            prompt: prompt.to_string(),
            seed,
        };
        let mut line = serde_json::to_vec(&rec)?;
        line.push(b'\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.ledger_path())?;
        f.write_all(&line)?;
        f.flush()?;
        self.next_seq += 1;
        self.ledger_offset += line.len() as u64;
        self.seen_requests.insert(request_id.to_string());
        Ok(rec)
    }

    /// Replays the whole ledger from disk.
    pub fn ledger(&self) -> Result<Vec<UsageRecord>> {
        let path = self.ledger_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let bytes = std::fs::read(&path)?;
        let mut out = Vec::new();
        for line in bytes.split(|&b| b == b'\n') {
            if line.is_empty() {
                continue;
            }
            out.push(
                serde_json::from_slice(line)
                    .map_err(|e| CoreError::RegistryCorrupt(format!("ledger row: {e}")))?,
            );
        }
        Ok(out)
    }

    /// Pure fold over the ledger: every (request, distinct plug-in) pair in
    /// the period counts one use for the plug-in's owner; shares are
    /// proportional counts. `period` is an inclusive logical-time range.
    pub fn attribution_report(&self, period: Option<(u64, u64)>) -> Result<RewardStatement> {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut total = 0u64;
        for rec in self.ledger()? {
            if let Some((lo, hi)) = period {
                if rec.at < lo || rec.at > hi {
                    continue;
                }
            }
            let distinct: BTreeSet<&String> = rec.plugin_ids.iter().collect();
            for id in distinct {
                let owner = self
                    .manifests
                    .get(id)
                    .map(|m| m.owner_id.clone())
                    .ok_or_else(|| {
                        CoreError::RegistryCorrupt(format!(
                            "ledger references unregistered plug-in {id}"
                        ))
                    })?;
                *counts.entry(owner).or_insert(0) += 1;
                total += 1;
            }
        }
        let owners = counts
            .into_iter()
            .map(|(owner, uses)| {
                (owner, OwnerShare { uses, share: uses as f64 / total as f64 })
            })
            .collect();
        Ok(RewardStatement {
            period,
            total_uses: total,
            owners: if total == 0 { BTreeMap::new() } else { owners },
        })
    }
}
