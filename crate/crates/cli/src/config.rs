//! Layered configuration: command-line flag, then config file, then default.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use f2hdr::coarseflow::HornSchunckConfig;
use f2hdr::exposure::DEFAULT_MU;
use f2hdr::pipeline::FlowSourceSpec;
use f2hdr::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// File written into the output directory with the resolved settings.
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

/// Environment variable that forces single-threaded execution.
pub const NO_PARALLEL_ENV: &str = "F2HDR_NO_PARALLEL";

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sequence manifest (`path<TAB>exposure` per line).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Parameter checkpoint; `model.json` beside it selects the architecture.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `classical` or `ingest:<dir>`.
    #[arg(long = "flow-src")]
    pub flow_src: Option<String>,
    /// Output directory, created when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-frame processing.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// μ of the μ-law tonemap.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Display gamma of the input frames; overrides the manifest.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Scale of the adapter flow residual.
    #[arg(long)]
    pub lambda: Option<f64>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub flow_src: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub mu: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub results: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub flow: Option<HornSchunckConfig>,
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }
}

/// Settings after applying precedence; echoed to the sidecar file.
#[derive(Clone, Debug, Serialize)]
pub struct Effective {
    pub command: String,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub flow_src: String,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub mu: f64,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub results: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub flow: HornSchunckConfig,
    pub train: Option<TrainConfig>,
}

impl Effective {
    /// Merges flags over the config file over built-in defaults.
    pub fn resolve(command: &str, args: &CommonArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut jobs = args.jobs.or(file.jobs).unwrap_or(1);
        if std::env::var(NO_PARALLEL_ENV).is_ok_and(|v| v == "1") {
            jobs = 1;
        }
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        let train_seed = file.train.as_ref().map(|t| t.seed);
        let train_mu = file.train.as_ref().map(|t| t.mu);
        let mut eff = Effective {
            command: command.to_string(),
            manifest: args.manifest.clone().or(file.manifest),
            checkpoint: args.checkpoint.clone().or(file.checkpoint),
            flow_src: args
                .flow_src
                .clone()
                .or(file.flow_src)
                .unwrap_or_else(|| "classical".into()),
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            seed: args.seed.or(file.seed).or(train_seed).unwrap_or(0),
            jobs,
            mu: args.mu.or(file.mu).or(train_mu).unwrap_or(DEFAULT_MU),
            gamma: args.gamma.or(file.gamma),
            lambda: args.lambda.or(file.lambda),
            results: file.results,
            gt: file.gt,
            flow: file.flow.unwrap_or_default(),
            train: file.train,
        };
        if !(eff.mu > 0.0) {
            return Err(CliError::Config(format!("mu must be positive, got {}", eff.mu)));
        }
        eff.flow_source()?;
        if command == "train" {
            let mut t = eff.train.take().unwrap_or_default();
            t.seed = eff.seed;
            t.mu = eff.mu;
            if let Some(l) = eff.lambda {
                t.model.stage1.adapter.lambda = l;
            }
            eff.train = Some(t);
        }
        Ok(eff)
    }

    pub fn flow_source(&self) -> Result<FlowSourceSpec, CliError> {
        parse_flow_src(&self.flow_src, &self.flow)
    }

    pub fn require_manifest(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::Config("a manifest is required (--manifest)".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&Path, CliError> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Config("a checkpoint is required (--checkpoint)".into()))
    }

    /// Creates the output directory and writes the sidecar.
    pub fn prepare_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(f2hdr::Error::from)?;
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(self.out.join(EFFECTIVE_CONFIG_FILE), text).map_err(f2hdr::Error::from)?;
        Ok(())
    }
}

pub fn parse_flow_src(s: &str, classical: &HornSchunckConfig) -> Result<FlowSourceSpec, CliError> {
    if s == "classical" {
        return Ok(FlowSourceSpec::Classical(*classical));
    }
    match s.strip_prefix("ingest:") {
        Some(dir) if !dir.is_empty() => Ok(FlowSourceSpec::IngestDir(PathBuf::from(dir))),
        _ => Err(CliError::Config(format!(
            "--flow-src must be `classical` or `ingest:<dir>`, got `{s}`"
        ))),
    }
}
