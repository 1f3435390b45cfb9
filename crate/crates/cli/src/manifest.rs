use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Record of one run. `config` holds the fully resolved arguments, so a run
/// can be repeated from its manifest alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    pub sampler: Option<SamplerSummary>,
    /// Subcommand-specific facts (redraw counts, clamped replicates, ...).
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSummary {
    pub divergences: usize,
    pub total_draws: usize,
    pub divergence_rate: f64,
    pub max_depth_hits: usize,
    /// `None` with a single chain.
    pub max_rhat: Option<f64>,
    pub min_ess_bulk: Option<f64>,
}

impl RunManifest {
    pub fn new<C: Serialize>(subcommand: &str, config: &C) -> anyhow::Result<Self> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            sampler: None,
            details: serde_json::Value::Null,
        })
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// `<file>.manifest.json` next to a single-file output.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}
