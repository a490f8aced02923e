//! The JSON run config. Every section is optional; command-line flags
//! override whatever the file sets, and the merged result is echoed into
//! every artifact a command writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use phead_core::base_lm::PretrainConfig;
use phead_core::ph_head::PHConfig;
use phead_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const TOOL_VERSION: &str = concat!("phead ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub root: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub head: HeadSpec,
    pub sweep: SweepSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    /// Feed-forward width of the head.
    pub hidden_dim: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            hidden_dim: 64,
            heads: 2,
            dropout: 0.1,
        }
    }
}

impl HeadSpec {
    pub fn config(&self, d_model: usize, seed: u64) -> PHConfig {
        PHConfig {
            dropout_p: self.dropout,
            ..PHConfig::new(d_model, self.hidden_dim, self.heads).with_seed(seed)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub hidden_dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub per_class: Vec<usize>,
    pub epochs: Vec<usize>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            hidden_dims: vec![64],
            heads: vec![2],
            per_class: vec![50, 100],
            epochs: vec![50, 100],
            seeds: vec![0],
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn root(&self) -> Result<&Path> {
        self.root
            .as_deref()
            .context("no registry root: pass --root, set PH_REGISTRY_ROOT, or set \"root\" in the config")
    }
}

/// `x = flag.unwrap_or(x)` for every flag given.
pub fn apply<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Wraps a command result with the tool version and resolved config.
#[derive(Serialize)]
pub struct Artifact<'a, T: Serialize> {
    pub tool: &'static str,
    pub command: &'a str,
    pub config: &'a RunConfig,
    #[serde(flatten)]
    pub body: T,
}
