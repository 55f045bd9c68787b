//! Config-file layer under the command-line flags.
//!
//! The file is JSON whose keys mirror the long flag names (with `_` for `-`).
//! Nested parameter blocks may be given inline or as a path to a JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use archoscope::emulator::{CostModel, RenderParams};
use archoscope::extraction::ExtractionConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const ENV_VAR: &str = "ARCHOSCOPE_CONFIG";

/// Either an inline object or a path to a JSON file holding one.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Inline<T> {
    Path(PathBuf),
    Value(T),
}

impl<T: DeserializeOwned> Inline<T> {
    pub fn load(self) -> Result<T> {
        match self {
            Inline::Value(v) => Ok(v),
            Inline::Path(p) => read_json(&p),
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub noise: Option<f64>,
    pub average: Option<u32>,
    pub annotate: Option<bool>,
    pub cost_model: Option<Inline<CostModel>>,
    pub render: Option<Inline<RenderParams>>,
    pub input_shape: Option<String>,
    pub report: Option<PathBuf>,
    pub thresholds: Option<Inline<ExtractionConfig>>,
    pub window: Option<usize>,
    pub hop: Option<usize>,
}

impl FileConfig {
    /// Loads `explicit`, else the file named by `ARCHOSCOPE_CONFIG`, else
    /// nothing.
    pub fn discover(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(ENV_VAR).filter(|v| !v.is_empty()).map(PathBuf::from),
        };
        match path {
            Some(p) => read_json(&p),
            None => Ok(Self::default()),
        }
    }
}

/// Settings actually used by `synth`, after merging flags over the file.
#[derive(Debug, Clone, Serialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub noise: f64,
    pub average: u32,
    pub annotate: bool,
    pub cost_model: CostModel,
    pub render: RenderParams,
}

/// Settings actually used by `extract`.
#[derive(Debug, Clone, Serialize)]
pub struct ExtractConfig {
    pub input_shape: String,
    pub report: Option<PathBuf>,
    pub thresholds: ExtractionConfig,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpectroConfig {
    pub window: usize,
    pub hop: usize,
}

impl Default for SpectroConfig {
    fn default() -> Self {
        Self { window: 256, hop: 128 }
    }
}
