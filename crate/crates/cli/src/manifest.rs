use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::Config;

pub const FILE_NAME: &str = "manifest.json";

/// Everything needed to repeat a run. Written before any result file and
/// finalized with the wall-clock time once the run ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Config,
    pub seeds: Vec<u64>,
    /// Result files, relative to the output directory.
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub wall_clock_secs: Option<f64>,
    /// Runs that stopped on a non-finite loss, as `method:seed`.
    #[serde(default)]
    pub diverged: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Config, seeds: Vec<u64>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config,
            seeds,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_secs: None,
            diverged: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn write(&self, out_dir: &Path) -> anyhow::Result<()> {
        let path = out_dir.join(FILE_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
