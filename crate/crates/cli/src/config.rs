//! The run configuration: one structured file binding every hyperparameter
//! in the framework, with full defaults, strict unknown-key rejection, and
//! a canonical content hash that stamps every artifact.
//!
//! Precedence: built-in defaults < config file < command-line flags. Each
//! flag that actually overrides a value is recorded alongside the hash of
//! the *effective* (post-override) config, so an artifact's provenance is
//! always the pair (config hash, override list).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use atelier_core::diffusion::BaseTrainHp;
use atelier_core::merge::MergeHp;
use atelier_core::metrics::{EmbedderTrainHp, EvalConfig};
use atelier_core::training::ExtractionHp;
use atelier_core::util::sha256_hex;
use atelier_core::weights::ArchConfig;

use crate::CliError;

pub const CONFIG_FORMAT: &str = "run-config/1";

/// Noise-schedule parameters (linear beta ramp).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { t_max: 50, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

/// Corpus-generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    /// Images per prompt in the training corpus.
    pub per_prompt_train: usize,
    /// Images per prompt in the held-out evaluation corpus.
    pub per_prompt_eval: usize,
    /// Concepts whose target prompts enter the corpus (style and character
    /// names from the built-in vocabulary).
    pub concepts: Vec<String>,
    /// Concepts whose images are generated but excluded from base-model
    /// training (still seen by the feature embedder).
    pub holdout_concepts: Vec<String>,
    /// How many of the built-in training contents to use.
    pub n_contents: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 42,
            per_prompt_train: 8,
            per_prompt_eval: 4,
            concepts: atelier_core::vocab::default_concepts()
                .into_iter()
                .map(|c| c.id)
                .collect(),
            holdout_concepts: Vec::new(),
            n_contents: atelier_core::vocab::TRAIN_CONTENTS.len(),
        }
    }
}

impl DataConfig {
    /// The content nouns in play for curation and evaluation prompts.
    pub fn contents(&self) -> Vec<String> {
        atelier_core::vocab::TRAIN_CONTENTS
            .iter()
            .take(self.n_contents)
            .map(|s| s.to_string())
            .collect()
    }
}

/// Defaults for the `generate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub guidance_scale: f64,
    pub n: usize,
    pub seed: u64,
    pub user_id: String,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { guidance_scale: 1.0, n: 4, seed: 7, user_id: "anon".into() }
    }
}

/// Output locations. Relative paths are resolved against the process's
/// working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub run_dir: PathBuf,
    /// Registry location; `None` puts it at `<run_dir>/registry`.
    pub registry_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { run_dir: PathBuf::from("run"), registry_dir: None }
    }
}

impl PathsConfig {
    pub fn registry(&self) -> PathBuf {
        self.registry_dir.clone().unwrap_or_else(|| self.run_dir.join("registry"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format: String,
    pub paths: PathsConfig,
    pub schedule: ScheduleConfig,
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub base_train: BaseTrainHp,
    pub embedder: EmbedderTrainHp,
    pub extraction: ExtractionHp,
    pub merge: MergeHp,
    pub eval: EvalConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format: CONFIG_FORMAT.to_string(),
            paths: PathsConfig::default(),
            schedule: ScheduleConfig::default(),
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            base_train: BaseTrainHp::default(),
            embedder: EmbedderTrainHp::default(),
            extraction: ExtractionHp::default(),
            merge: MergeHp::default(),
            eval: EvalConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Loads a TOML config file; absent file -> full defaults. Unknown keys
    /// anywhere in the document are rejected.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text).map_err(|e| {
                    CliError::config(format!("config {}: {e}", p.display()))
                })?
            }
        };
        if cfg.format != CONFIG_FORMAT {
            return Err(CliError::config(format!(
                "unsupported config format `{}` (expected `{CONFIG_FORMAT}`)",
                cfg.format
            )));
        }
        Ok(cfg)
    }

    /// Canonical hash of the effective configuration. JSON serialization is
    /// canonical here: field order is fixed by the struct definitions.
    pub fn content_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Records flags that overrode config values, as `--flag=value` strings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Overrides(pub Vec<String>);

impl Overrides {
    /// Applies `Some(value)` from a flag onto a config slot and records the
    /// override string.
    pub fn apply<V: Clone + std::fmt::Display>(
        &mut self,
        slot: &mut V,
        flag: &str,
        value: &Option<V>,
    ) {
        if let Some(v) = value {
            *slot = v.clone();
            self.0.push(format!("--{flag}={v}"));
        }
    }

    pub fn apply_path(&mut self, slot: &mut PathBuf, flag: &str, value: &Option<PathBuf>) {
        if let Some(v) = value {
            *slot = v.clone();
            self.0.push(format!("--{flag}={}", v.display()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_every_documented_value() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.format, "run-config/1");
        assert_eq!(cfg.schedule.t_max, 50);
        assert_eq!(cfg.schedule.beta_min, 1e-4);
        assert_eq!(cfg.schedule.beta_max, 2e-2);
        assert_eq!(cfg.arch.image_size, 32);
        assert_eq!(cfg.arch.widths, [32, 64, 128]);
        assert_eq!(cfg.base_train.epochs, 40);
        assert_eq!(cfg.extraction.lr, 1.5e-4);
        assert_eq!(cfg.extraction.outer_iterations, 10);
        assert_eq!(cfg.extraction.epochs_per_iteration, 30);
        assert_eq!(cfg.extraction.images_per_iteration, 8);
        assert_eq!(cfg.extraction.rank, 40);
        assert_eq!(cfg.extraction.recontext_rate, 1.0);
        assert_eq!(cfg.merge.lr, 1e-3);
        assert_eq!(cfg.merge.rank, 140);
        assert_eq!(cfg.merge.max_iterations, 500);
        assert_eq!(cfg.eval.n_per_group, 256);
        assert_eq!(cfg.data.concepts.len(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let top: Result<RunConfig, _> = toml::from_str("zzz_not_a_key = 1");
        assert!(top.is_err());
        let nested: Result<RunConfig, _> =
            toml::from_str("[extraction]\nlr = 0.1\nzzz_not_a_key = 1");
        assert!(nested.is_err());
        let arch: Result<RunConfig, _> = toml::from_str("[arch]\nzzz_not_a_key = 1");
        assert!(arch.is_err());
        let eval: Result<RunConfig, _> = toml::from_str("[eval]\nzzz_not_a_key = 1");
        assert!(eval.is_err());
    }

    #[test]
    fn partial_sections_override_only_named_fields() {
        let cfg: RunConfig =
            toml::from_str("[extraction]\nrank = 7\n\n[schedule]\nt_max = 12").unwrap();
        assert_eq!(cfg.extraction.rank, 7);
        assert_eq!(cfg.extraction.lr, 1.5e-4, "unnamed fields keep defaults");
        assert_eq!(cfg.schedule.t_max, 12);
        assert_eq!(cfg.schedule.beta_min, 1e-4);
    }

    #[test]
    fn hash_tracks_every_field_and_roundtrips_via_toml() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.content_hash(), b.content_hash());
        b.extraction.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());

        let text = a.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.content_hash(), a.content_hash());
    }
}
