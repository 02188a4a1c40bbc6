use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fltrace::config::ExperimentConfig;
use fltrace::pipeline::{read_json, write_json, RunLayout};
use fltrace::seeds::Seeds;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Provenance of a run directory: the config snapshot, every seed, the
/// files each subcommand produced and how long it took.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created_unix: u64,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub command: String,
    pub args: Vec<String>,
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: unix_now(),
            seeds: config.seeds,
            config,
            artifacts: BTreeMap::new(),
            steps: Vec::new(),
        }
    }

    pub fn load(layout: &RunLayout) -> CliResult<Self> {
        let path = layout.manifest();
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                path,
                hint: "run `fltrace setup` for this run directory first".into(),
            });
        }
        Ok(read_json(&path)?)
    }

    pub fn save(&self, layout: &RunLayout) -> CliResult<()> {
        Ok(write_json(&layout.manifest(), self)?)
    }

    /// Records a finished step with its outputs made relative to the run root.
    pub fn record(&mut self, layout: &RunLayout, command: &str, args: Vec<String>, started_unix: u64, wall_seconds: f64, outputs: &[PathBuf]) {
        self.steps.push(StepRecord {
            command: command.to_string(),
            args,
            started_unix,
            wall_seconds,
            outputs: outputs.iter().map(|p| relative(&layout.root, p)).collect(),
        });
    }
}

pub fn relative(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}
