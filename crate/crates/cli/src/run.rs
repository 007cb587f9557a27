//! Run plumbing: config loading, staged output directories, run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use cosam::config::{ModelConfig, TrainConfig};
use cosam::phantom::PhantomConfig;
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run.json";

pub enum CliError {
    /// Bad arguments or unmet preconditions; exit code 2.
    Usage(String),
    Failed(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Every numeric default lives here; flags only override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
            }
        };
        if let Some(s) = seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
            cfg.phantom.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
}

/// Output directory written under a temporary sibling name and renamed into
/// place by [`StagedOutput::commit`].
pub struct StagedOutput {
    target: PathBuf,
    staging: PathBuf,
    force: bool,
    started_at: String,
}

impl StagedOutput {
    pub fn begin(target: &Path, force: bool) -> CliResult<Self> {
        if target.exists() && !force {
            return usage(format!(
                "output directory {} already exists (use --force to replace it)",
                target.display()
            ));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("invalid output path {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            force,
            started_at: now(),
        })
    }

    /// Where the command writes its files.
    pub fn dir(&self) -> &Path {
        &self.staging
    }

    /// Final location of a file written to `dir()` at `rel`.
    pub fn final_path(&self, rel: &str) -> PathBuf {
        self.target.join(rel)
    }

    pub fn commit(
        self,
        argv: &[String],
        config_path: Option<&Path>,
        seed: Option<u64>,
    ) -> CliResult<()> {
        let manifest = RunManifest {
            command: argv.to_vec(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            version: version(),
            out_dir: self.target.clone(),
            started_at: self.started_at.clone(),
            finished_at: now(),
        };
        fs::write(
            self.staging.join(RUN_MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        if self.target.exists() && self.force {
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("removing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving output into {}", self.target.display()))?;
        Ok(())
    }
}

impl Drop for StagedOutput {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn version() -> String {
    match option_env!("COSAM_GIT_DESCRIBE") {
        Some(d) => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Data-loading threads: `COSAM_NUM_WORKERS` if set, else the core count.
pub fn num_workers() -> CliResult<usize> {
    match std::env::var("COSAM_NUM_WORKERS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => usage(format!(
                "COSAM_NUM_WORKERS must be a positive integer, got `{v}`"
            )),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        usage(format!("{what} {} does not exist", path.display()))
    }
}
