//! `atelier` — single entry point for the plug-in framework lifecycle:
//! corpus generation, base training, plug-in addition / extraction /
//! combination, metered generation, evaluation, and registry queries.
//!
//! Every command reads one run-config file (flags take precedence, and
//! both the effective config hash and the override list stamp every
//! artifact), writes its outputs under the run directory, and appends one
//! manifest row per artifact. Failures emit a machine-readable error
//! record and a non-zero exit status; exit status 0 means every artifact
//! was written and validated.

pub mod commands;
pub mod config;
pub mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atelier_core::CoreError;

use crate::config::{Overrides, RunConfig};
use crate::rundir::{emit_error, ErrorRecord, ERROR_FORMAT};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// CLI-level error: a kind tag (for the machine-readable record) plus a
/// human-readable message.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { kind: "config", message: message.into() }
    }
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { kind: "usage", message: message.into() }
    }
    /// Authorization refusal: the request names a plug-in the registry
    /// does not vouch for.
    pub fn refused(message: impl Into<String>) -> Self {
        CliError { kind: "refused", message: message.into() }
    }
    pub fn internal(message: impl Into<String>) -> Self {
        CliError { kind: "internal", message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::NotRegistered(_) => "not_registered",
            CoreError::DuplicateRequest(_) => "duplicate_request",
            CoreError::OwnerConflict { .. } => "owner_conflict",
            CoreError::HashMismatch { .. } => "hash_mismatch",
            CoreError::BaseHashMismatch { .. } => "base_hash_mismatch",
            CoreError::RegistryCorrupt(_) => "registry_corrupt",
            CoreError::UnknownToken(_) | CoreError::MalformedPrompt(_) => "bad_prompt",
            CoreError::InvalidHyperparameter(_)
            | CoreError::InvalidSchedule(_)
            | CoreError::InvalidGuidanceScale(_)
            | CoreError::InvalidMergeJob(_) => "invalid_parameter",
            CoreError::EmptyDataset(_) => "empty_dataset",
            CoreError::Archive(_) => "bad_archive",
            CoreError::Io(_) => "io",
            _ => "core",
        };
        CliError { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { kind: "io", message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError { kind: "json", message: e.to_string() }
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "atelier",
    version,
    about = "Concept plug-ins for a small conditional diffusion model: train, extract, combine, meter"
)]
pub struct Cli {
    /// Run-config TOML file; omitted = built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override the run directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Override the registry directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub registry_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic training and evaluation corpora.
    GenData {
        /// Corpus seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Images per prompt in the training corpus.
        #[arg(long)]
        per_prompt: Option<usize>,
    },
    /// Train the base model and the feature embedder; enroll the base.
    TrainBase {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a plug-in for a concept from corpus data (addition).
    Add {
        #[arg(long)]
        concept: String,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract a concept from the base: de-concept, then re-context.
    Extract {
        #[arg(long)]
        concept: String,
        #[arg(long)]
        rank: Option<usize>,
        /// Re-context iteration multiplier (>= 1).
        #[arg(long)]
        recontext_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Curate de-concept images from the stored corpus instead of
        /// sampling them from the base.
        #[arg(long)]
        from_corpus: bool,
    },
    /// Distill several registered plug-ins into one.
    Combine {
        /// Registered plug-in id (repeat per entry).
        #[arg(long = "plugin", required = true, value_name = "ID")]
        plugins: Vec<String>,
        /// additive | subtractive
        #[arg(long)]
        mode: String,
        /// Distillation prompt per entry (defaults to each plug-in
        /// concept's target prompt; repeat to pair with --plugin order).
        #[arg(long = "prompt", value_name = "TEXT")]
        prompts: Vec<String>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Samples per entry for the fidelity report (0 = skip).
        #[arg(long, default_value_t = 0)]
        fidelity: usize,
    },
    /// Sample images; plug-in access is authorized and metered through the
    /// registry.
    Generate {
        #[arg(long)]
        prompt: String,
        /// Registered plug-in id to attach (+1); metered. Repeatable.
        #[arg(long = "plugin", value_name = "ID")]
        plugins: Vec<String>,
        /// Registered plug-in id to detach (-1), modeling a deployment
        /// with the concept extracted. Repeatable, unmetered.
        #[arg(long = "minus", value_name = "ID")]
        minus: Vec<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        user: Option<String>,
        /// Idempotency key for metering; defaults to a digest of the
        /// request fields.
        #[arg(long)]
        request_id: Option<String>,
        /// Output filename stem (defaults to a request digest).
        #[arg(long)]
        stem: Option<String>,
    },
    /// Compare a candidate composition against the base model.
    Evaluate {
        #[arg(long)]
        concept: String,
        /// Plug-in file to attach, as PATH or PATH@SIGN (sign +1/-1).
        #[arg(long = "attach", value_name = "PATH[@SIGN]")]
        attach: Vec<String>,
        /// Registered plug-in to attach, as ID or ID@SIGN.
        #[arg(long = "attach-id", value_name = "ID[@SIGN]")]
        attach_id: Vec<String>,
        /// Samples per prompt group.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        guidance: Option<f64>,
        /// Comma-separated content nouns for the prompt groups.
        #[arg(long)]
        contents: Option<String>,
        /// Report filename stem (defaults to the concept).
        #[arg(long)]
        label: Option<String>,
    },
    /// Plug-in registry operations.
    Registry {
        #[command(subcommand)]
        cmd: RegistryCmd,
    },
}

#[derive(Subcommand)]
pub enum RegistryCmd {
    /// Enroll a base-model archive so plug-ins can target it.
    EnrollBase {
        #[arg(long, value_name = "FILE")]
        model_file: PathBuf,
        #[arg(long, default_value = "base")]
        label: String,
    },
    /// Register a plug-in archive under an owner.
    Register {
        #[arg(long, value_name = "FILE")]
        plugin_file: PathBuf,
        #[arg(long)]
        owner: String,
        #[arg(long, default_value = "unspecified")]
        license: String,
    },
    /// Fetch a registered plug-in byte-exactly (hash re-verified).
    Fetch {
        #[arg(long)]
        id: String,
        /// Output path (defaults to plugins/fetched-<id12>.bin in the run
        /// dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold the usage ledger into proportional owner shares.
    Report {
        /// Inclusive logical-time lower bound.
        #[arg(long)]
        from: Option<u64>,
        /// Inclusive logical-time upper bound.
        #[arg(long)]
        to: Option<u64>,
    },
    /// Check whether a plug-in targets the given base hash.
    Verify {
        #[arg(long)]
        id: String,
        /// Base hash to check against (defaults to the run's base model).
        #[arg(long)]
        base_hash: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainBase { .. } => "train-base",
            Command::Add { .. } => "add",
            Command::Extract { .. } => "extract",
            Command::Combine { .. } => "combine",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Registry { cmd } => match cmd {
                RegistryCmd::EnrollBase { .. } => "registry-enroll-base",
                RegistryCmd::Register { .. } => "registry-register",
                RegistryCmd::Fetch { .. } => "registry-fetch",
                RegistryCmd::Report { .. } => "registry-report",
                RegistryCmd::Verify { .. } => "registry-verify",
            },
        }
    }
}

/// Full command run: parse -> configure -> dispatch -> report.
pub fn cli_main() -> ExitCode {
    let cli = Cli::parse();
    let command_name = cli.command.name();

    // Effective config: defaults < file < global flags < command flags.
    let mut overrides = Overrides::default();
    let cfg = match RunConfig::load(cli.config.as_deref()) {
        Ok(mut cfg) => {
            overrides.apply_path(&mut cfg.paths.run_dir, "run-dir", &cli.run_dir);
            if let Some(dir) = &cli.registry_dir {
                cfg.paths.registry_dir = Some(dir.clone());
                overrides.0.push(format!("--registry-dir={}", dir.display()));
            }
            commands::apply_overrides(&mut cfg, &mut overrides, &cli.command);
            cfg
        }
        Err(e) => {
            emit_error(
                None,
                &ErrorRecord {
                    format: ERROR_FORMAT.to_string(),
                    command: command_name.to_string(),
                    kind: e.kind.to_string(),
                    message: e.message,
                    config_hash: None,
                },
            );
            return ExitCode::FAILURE;
        }
    };

    match commands::dispatch(&cfg, &overrides, cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit_error(
                Some(&cfg.paths.run_dir),
                &ErrorRecord {
                    format: ERROR_FORMAT.to_string(),
                    command: command_name.to_string(),
                    kind: e.kind.to_string(),
                    message: e.message,
                    config_hash: Some(cfg.content_hash()),
                },
            );
            ExitCode::FAILURE
        }
    }
}
