//! Block geometry, tuning modes, sparsity knobs, and named presets.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Which parameters train: everything, adapter factors over a frozen base,
/// or adapters plus the sparse attention/FFN machinery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    Full,
    Lora,
    Sparse,
}

impl FromStr for TuningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "lora" => Ok(Self::Lora),
            "sparse" => Ok(Self::Sparse),
            other => Err(Error::Config(format!("unknown tuning mode {other:?} (full, lora, sparse)"))),
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Lora => "lora",
            Self::Sparse => "sparse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            other => Err(Error::Config(format!("unknown activation {other:?} (relu, gelu)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
        })
    }
}

/// Geometry and init settings for one Transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub activation: Activation,
    /// Adapter rank used by lora and sparse tuning.
    pub rank: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl BlockConfig {
    pub fn new(d_model: usize, d_head: usize, d_ffn: usize, activation: Activation) -> Result<Self> {
        if d_head == 0 || d_model % d_head != 0 {
            return Err(Error::Config(format!("head width {d_head} must divide model width {d_model}")));
        }
        Ok(Self {
            d_model,
            n_heads: d_model / d_head,
            d_ffn,
            activation,
            rank: 16,
            ln_eps: 1e-5,
            init_std: 0.02,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must divide model width {}",
                self.n_heads, self.d_model
            )));
        }
        if self.d_ffn == 0 {
            return Err(Error::Config("feed-forward width must be >= 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("layer-norm epsilon must be positive, got {}", self.ln_eps)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config(format!("init std must be positive, got {}", self.init_std)));
        }
        Ok(())
    }
}

/// Knobs for the sparse attention and routed feed-forward paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Kept attention fraction: each query attends to max(1, floor(lambda*n)) keys.
    pub lambda: f64,
    /// Active feed-forward fraction: each token uses max(1, round(beta*G)) groups.
    pub beta: f64,
    /// Number of feed-forward neuron groups G.
    pub n_groups: usize,
    /// Codewords per codebook E.
    pub n_words: usize,
    /// Sub-vector width per codebook.
    pub d_sub: usize,
    /// Refresh codebooks every this many optimizer steps.
    pub refresh_period: u64,
    /// Multiply each group's output by its sigmoid router gate.
    pub gated: bool,
    /// Scale selected attention scores by 1/sqrt(d_head).
    pub scale_scores: bool,
    /// Apply causal masking at softmax time instead of prefiltering candidates.
    pub causal_at_softmax: bool,
    /// Coefficient on the router load-balance penalty.
    pub balance_weight: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            lambda: 0.125,
            beta: 0.5,
            n_groups: 4,
            n_words: 16,
            d_sub: 8,
            refresh_period: 20,
            gated: true,
            scale_scores: false,
            causal_at_softmax: false,
            balance_weight: 0.01,
        }
    }
}

impl SparsityConfig {
    /// Keys kept per query at sequence length `n`.
    pub fn keys_kept(&self, n: usize) -> usize {
        ((self.lambda * n as f64).floor() as usize).max(1)
    }

    /// Groups active per token out of G.
    pub fn groups_active(&self) -> usize {
        ((self.beta * self.n_groups as f64).round() as usize).clamp(1, self.n_groups)
    }

    pub fn validate(&self, cfg: &BlockConfig) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.n_groups == 0 || cfg.d_ffn % self.n_groups != 0 {
            return Err(Error::Config(format!(
                "{} groups must divide feed-forward width {}",
                self.n_groups, cfg.d_ffn
            )));
        }
        if self.n_words == 0 || self.n_words > u16::MAX as usize {
            return Err(Error::Config(format!("codewords per book must lie in [1, 65535], got {}", self.n_words)));
        }
        if self.d_sub == 0 {
            return Err(Error::Config("sub-vector width must be >= 1".into()));
        }
        if self.refresh_period == 0 {
            return Err(Error::Config("codebook refresh period must be >= 1".into()));
        }
        if !(self.balance_weight >= 0.0) {
            return Err(Error::Config(format!("balance weight must be >= 0, got {}", self.balance_weight)));
        }
        Ok(())
    }
}

/// Built-in block geometries, named after familiar decoder families.
pub const PRESET_NAMES: [&str; 5] = ["opt-1024", "opt-2048", "opt-2560", "llama-2560", "llama-4096"];

/// Look up a built-in preset by name.
pub fn preset(name: &str) -> Result<BlockConfig> {
    let (d_model, d_head, d_ffn, act) = match name {
        "opt-1024" => (1024, 64, 4096, Activation::Relu),
        "opt-2048" => (2048, 64, 8192, Activation::Relu),
        "opt-2560" => (2560, 80, 10240, Activation::Relu),
        "llama-2560" => (2560, 128, 6912, Activation::Gelu),
        "llama-4096" => (4096, 128, 11008, Activation::Gelu),
        other => return Err(Error::UnknownPreset(other.to_owned())),
    };
    BlockConfig::new(d_model, d_head, d_ffn, act)
}

/// Parse a preset from `key = value` lines. Recognized keys: `d_model`,
/// `d_head` or `n_heads` (exactly one), `d_ffn`, `activation`; optional
/// `rank`, `ln_eps`, `init_std`. `#` starts a comment.
pub fn parse_preset(text: &str) -> Result<BlockConfig> {
    let mut d_model = None;
    let mut d_head = None;
    let mut n_heads = None;
    let mut d_ffn = None;
    let mut activation = None;
    let mut rank = None;
    let mut ln_eps = None;
    let mut init_std = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("preset line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: String| Error::Config(format!("preset line {}: {e}", lineno + 1));
        match key {
            "d_model" => d_model = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "d_head" => d_head = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "n_heads" => n_heads = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "d_ffn" => d_ffn = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "activation" => activation = Some(value.parse::<Activation>()?),
            "rank" => rank = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "ln_eps" => ln_eps = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "init_std" => init_std = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }

    let d_model = d_model.ok_or_else(|| Error::Config("preset is missing d_model".into()))?;
    let d_ffn = d_ffn.ok_or_else(|| Error::Config("preset is missing d_ffn".into()))?;
    let activation = activation.ok_or_else(|| Error::Config("preset is missing activation".into()))?;
    let d_head = match (d_head, n_heads) {
        (Some(dh), None) => dh,
        (None, Some(nh)) => {
            if nh == 0 || d_model % nh != 0 {
                return Err(Error::Config(format!("{nh} heads must divide model width {d_model}")));
            }
            d_model / nh
        }
        (Some(_), Some(_)) => return Err(Error::Config("preset sets both d_head and n_heads".into())),
        (None, None) => return Err(Error::Config("preset needs d_head or n_heads".into())),
    };
    let mut cfg = BlockConfig::new(d_model, d_head, d_ffn, activation)?;
    if let Some(r) = rank {
        cfg.rank = r;
    }
    if let Some(e) = ln_eps {
        cfg.ln_eps = e;
    }
    if let Some(s) = init_std {
        cfg.init_std = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Load a preset: a built-in name, or a path to a `key = value` file.
pub fn resolve_preset(name_or_path: &str) -> Result<BlockConfig> {
    match preset(name_or_path) {
        Ok(cfg) => Ok(cfg),
        Err(Error::UnknownPreset(_)) if Path::new(name_or_path).is_file() => {
            parse_preset(&std::fs::read_to_string(name_or_path)?)
        }
        Err(e) => Err(e),
    }
}
