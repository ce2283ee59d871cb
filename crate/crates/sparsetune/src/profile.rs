//! Deterministic cost profiling of a block (or one of its submodules).
//!
//! A profile run builds one block from a seed, pushes a batch of Gaussian
//! sequences through it (optionally with a backward pass), and reports the
//! exact operation counts the tape recorded: multiply-add FLOPs in total,
//! per module, and per op; the live-buffer high-water mark; and stored
//! attention entries. The report serializes to JSON and is byte-identical
//! across runs with the same spec — wall-clock time is deliberately not
//! part of it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionOutput;
use crate::block::{Block, BlockOutput, FfnLayer};
use crate::config::{resolve_preset, BlockConfig, SparsityConfig, TuningMode};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tape, Tensor, TensorId};

pub const PROFILE_VERSION: u32 = 1;

/// Which part of the block a profile run exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfiledModule {
    Block,
    Attention,
    Ffn,
}

impl FromStr for ProfiledModule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Self::Block),
            "attention" => Ok(Self::Attention),
            "ffn" => Ok(Self::Ffn),
            other => Err(Error::Config(format!("unknown module {other:?} (block, attention, ffn)"))),
        }
    }
}

impl fmt::Display for ProfiledModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Block => "block",
            Self::Attention => "attention",
            Self::Ffn => "ffn",
        })
    }
}

/// Everything a profile run depends on.
#[derive(Clone, Debug)]
pub struct ProfileSpec {
    /// Built-in preset name or path to a `key = value` preset file.
    pub name: String,
    pub tuning: TuningMode,
    pub module: ProfiledModule,
    /// Adapter rank (overrides the preset's).
    pub d_lora: usize,
    pub seq_length: usize,
    pub batch_size: usize,
    pub backward: bool,
    pub causal: bool,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self {
            name: "opt-2048".into(),
            tuning: TuningMode::Sparse,
            module: ProfiledModule::Block,
            d_lora: 16,
            seq_length: 512,
            batch_size: 16,
            backward: false,
            causal: false,
            lambda: 0.125,
            beta: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub op: String,
    pub flops: u64,
    pub share_percent: f64,
}

/// The versioned, reproducible profile result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileReport {
    pub version: u32,
    pub preset: String,
    pub tuning: TuningMode,
    pub module: ProfiledModule,
    pub seed: u64,
    pub seq_length: usize,
    pub batch_size: usize,
    pub backward: bool,
    pub causal: bool,
    pub block: BlockConfig,
    pub sparsity: SparsityConfig,
    /// Multiply-add pairs across the whole run.
    pub flops: u64,
    pub flops_by_module: BTreeMap<String, u64>,
    /// High-water mark of live tensor bytes.
    pub peak_bytes: u64,
    /// Attention probability entries stored across the batch.
    pub attention_entries: u64,
    pub attention_entries_per_head: f64,
    /// Bytes a per-token boolean mask over both feed-forward matrices
    /// would need for this many tokens — the materialized-mask baseline
    /// that routing avoids.
    pub dense_mask_baseline_bytes: u64,
    pub breakdown: Vec<BreakdownRow>,
}

impl ProfileReport {
    /// Canonical serialization; byte-identical for identical specs.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Bytes of per-token boolean masks over both feed-forward matrices.
pub fn dense_mask_baseline_bytes(tokens: u64, d_model: u64, d_ffn: u64) -> u64 {
    tokens * 2 * d_model * d_ffn
}

/// Batch of Gaussian `[n, d]` input sequences, deterministically derived
/// from the seed stream.
pub fn gen_random_sequences<T: Element>(
    tape: &mut Tape<T>,
    batch: usize,
    n: usize,
    d: usize,
    rng: &mut SeedRng,
) -> Result<Vec<TensorId>> {
    (0..batch)
        .map(|s| tape.leaf(Tensor::randn(vec![n, d], 1.0, &mut rng.split_str(&format!("input.{s}")))))
        .collect()
}

/// Run one profile. Single-threaded and deterministic.
pub fn run_profile(spec: &ProfileSpec) -> Result<ProfileReport> {
    let mut cfg = resolve_preset(&spec.name)?;
    cfg.rank = spec.d_lora;
    let sp = SparsityConfig { lambda: spec.lambda, beta: spec.beta, ..Default::default() };
    cfg.validate()?;
    sp.validate(&cfg)?;
    if spec.seq_length == 0 || spec.batch_size == 0 {
        return Err(Error::Config("sequence length and batch size must be >= 1".into()));
    }

    let mut tape = Tape::<f32>::new();
    let rng = SeedRng::new(spec.seed);
    let mut block = Block::new(&mut tape, "block", &cfg, &sp, spec.tuning, &mut rng.split_str("init"))?;
    let mark = tape.mark();

    // One sequence at a time: the tape rewinds to the parameter watermark
    // between sequences, so each input leaf is created inside the loop.
    for s in 0..spec.batch_size {
        let x = tape.leaf(Tensor::randn(
            vec![spec.seq_length, cfg.d_model],
            1.0,
            &mut rng.split_str(&format!("input.{s}")),
        ))?;
        let out = match spec.module {
            ProfiledModule::Block => block.forward(&mut tape, x, spec.causal, None)?.out,
            ProfiledModule::Attention => {
                let mha = &mut block.mha;
                tape.module_scope("attention", |t| mha.forward(t, x, spec.causal, None))?.out
            }
            ProfiledModule::Ffn => {
                let ffn = &block.ffn;
                tape.module_scope("ffn", |t| match ffn {
                    FfnLayer::Dense(f) => f.forward(t, x),
                    FfnLayer::Routed(f) => Ok(f.forward(t, x)?.out),
                })?
            }
        };
        if spec.backward {
            let loss = tape.sum(out)?;
            tape.backward(loss)?;
        }
        tape.reset_to(mark);
    }

    let totals = tape.totals();
    let mut breakdown: Vec<BreakdownRow> = totals
        .flops_by_op
        .iter()
        .map(|(op, &flops)| BreakdownRow {
            op: (*op).to_owned(),
            flops,
            share_percent: if totals.flops == 0 { 0.0 } else { flops as f64 * 100.0 / totals.flops as f64 },
        })
        .collect();
    breakdown.sort_by(|a, b| b.flops.cmp(&a.flops).then(a.op.cmp(&b.op)));

    let heads_total = (spec.batch_size * cfg.n_heads) as f64;
    Ok(ProfileReport {
        version: PROFILE_VERSION,
        preset: spec.name.clone(),
        tuning: spec.tuning,
        module: spec.module,
        seed: spec.seed,
        seq_length: spec.seq_length,
        batch_size: spec.batch_size,
        backward: spec.backward,
        causal: spec.causal,
        block: cfg.clone(),
        sparsity: sp,
        flops: totals.flops,
        flops_by_module: totals.flops_by_module.clone(),
        peak_bytes: totals.peak_bytes,
        attention_entries: totals.attention_entries,
        attention_entries_per_head: totals.attention_entries as f64 / heads_total,
        dense_mask_baseline_bytes: dense_mask_baseline_bytes(
            (spec.batch_size * spec.seq_length) as u64,
            cfg.d_model as u64,
            cfg.d_ffn as u64,
        ),
        breakdown,
    })
}

/// Mean attention mass carried by each row's top `fraction` of entries.
/// On a dense pattern this is the "how concentrated is attention" curve
/// read at one point; rows average with equal weight.
pub fn topk_attention_mass<T: Element>(tape: &Tape<T>, att: &AttentionOutput, fraction: f64) -> f64 {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must lie in (0, 1]");
    let mut total = 0.0;
    let mut rows = 0usize;
    for (pat, &probs) in att.patterns.iter().zip(&att.probs) {
        let vals = tape.data(probs);
        for i in 0..pat.n_rows {
            let lo = pat.indptr[i];
            let hi = pat.indptr[i + 1];
            if hi == lo {
                continue;
            }
            let mut row: Vec<f64> = vals[lo..hi].iter().map(|v| v.as_f64()).collect();
            row.sort_by(|a, b| b.partial_cmp(a).expect("probabilities are finite"));
            let k = ((fraction * row.len() as f64).ceil() as usize).clamp(1, row.len());
            total += row[..k].iter().sum::<f64>();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

/// Convenience wrapper used by the attention-concentration example: run a
/// dense block on Gaussian data and report the mean top-`fraction` mass.
pub fn dense_attention_concentration(
    cfg: &BlockConfig,
    seq_length: usize,
    fraction: f64,
    causal: bool,
    seed: u64,
) -> Result<f64> {
    let sp = SparsityConfig::default();
    let mut tape = Tape::<f32>::new();
    let rng = SeedRng::new(seed);
    let mut block = Block::new(&mut tape, "block", cfg, &sp, TuningMode::Full, &mut rng.split_str("init"))?;
    let x = tape.leaf(Tensor::randn(vec![seq_length, cfg.d_model], 1.0, &mut rng.split_str("input")))?;
    let BlockOutput { attention, .. } = block.forward(&mut tape, x, causal, None)?;
    Ok(topk_attention_mass(&tape, &attention, fraction))
}
