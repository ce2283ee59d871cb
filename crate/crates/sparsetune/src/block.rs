//! Pre-norm Transformer block in three tuning modes.
//!
//! full:   everything trains, dense attention and feed-forward.
//! lora:   frozen base, rank-r factors on all six weight matrices.
//! sparse: lora plus quantized top-L attention and group-routed
//!         feed-forward (router, codebooks).
//!
//! The block is residual and bias-free: out = h + FFN(LN2(h)) with
//! h = x + MHA(LN1(x)). Layer norms carry affine parameters that train
//! only in full mode. `snapshot`/`from_snapshot` move base weights across
//! tapes and modes with adapters merged in, which is both the export path
//! and the "adapt a trained dense block" path.

use crate::attention::{AttentionOutput, Mha};
use crate::config::{BlockConfig, SparsityConfig, TuningMode};
use crate::error::{Error, Result};
use crate::ffn::{DenseFfn, FfnOutput, Routing, RoutedFfn};
use crate::lora::AdapterSite;
use crate::rng::SeedRng;
use crate::tensor::{kernels, Element, Tape, Tensor, TensorId};

pub struct Block<T: Element> {
    pub name: String,
    pub cfg: BlockConfig,
    pub sp: SparsityConfig,
    pub mode: TuningMode,
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub mha: Mha<T>,
    pub ffn: FfnLayer,
}

pub enum FfnLayer {
    Dense(DenseFfn),
    Routed(RoutedFfn),
}

/// One block forward pass: activations plus sparsity telemetry.
pub struct BlockOutput {
    pub out: TensorId,
    pub attention: AttentionOutput,
    /// Router logits and assignments when the feed-forward is routed.
    pub routing: Option<(TensorId, Routing)>,
}

/// Base weights of a block with any adapters merged in. The exchange
/// format for mode switches and dense export.
#[derive(Clone, Debug)]
pub struct BlockSnapshot<T: Element> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w_i: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
}

impl<T: Element> Block<T> {
    /// Fresh block with Gaussian weights and unit layer norms.
    pub fn new(
        tape: &mut Tape<T>,
        name: &str,
        cfg: &BlockConfig,
        sp: &SparsityConfig,
        mode: TuningMode,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        sp.validate(cfg)?;
        let d = cfg.d_model;
        let train_ln = mode == TuningMode::Full;
        let ones = Tensor::new(vec![d], vec![T::one(); d])?;
        let zeros = Tensor::<T>::zeros(vec![d]);
        let ln1_gamma = tape.leaf(ones.clone().requires_grad(train_ln))?;
        let ln1_beta = tape.leaf(zeros.clone().requires_grad(train_ln))?;
        let ln2_gamma = tape.leaf(ones.requires_grad(train_ln))?;
        let ln2_beta = tape.leaf(zeros.requires_grad(train_ln))?;
        let mha = Mha::new(tape, &format!("{name}.attn"), cfg, mode, sp, rng)?;
        let ffn = match mode {
            TuningMode::Sparse => FfnLayer::Routed(RoutedFfn::new(tape, &format!("{name}.ffn"), cfg, sp, rng)?),
            _ => FfnLayer::Dense(DenseFfn::new(tape, &format!("{name}.ffn"), cfg, mode, rng)?),
        };
        Ok(Self {
            name: name.to_owned(),
            cfg: cfg.clone(),
            sp: sp.clone(),
            mode,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
            mha,
            ffn,
        })
    }

    /// Rebuild a block from snapshotted base weights in the given mode.
    /// Switching a trained full/lora block to sparse is adaptation: the
    /// base freezes, fresh factors and a router attach, and with
    /// lambda = beta = 1 the new block reproduces the old one.
    pub fn from_snapshot(
        tape: &mut Tape<T>,
        name: &str,
        snap: BlockSnapshot<T>,
        cfg: &BlockConfig,
        sp: &SparsityConfig,
        mode: TuningMode,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        sp.validate(cfg)?;
        let d = cfg.d_model;
        for (label, v) in [
            ("ln1 gamma", &snap.ln1_gamma),
            ("ln1 beta", &snap.ln1_beta),
            ("ln2 gamma", &snap.ln2_gamma),
            ("ln2 beta", &snap.ln2_beta),
        ] {
            if v.len() != d {
                return Err(Error::Config(format!("{label} has {} entries for width {d}", v.len())));
            }
        }
        let train_ln = mode == TuningMode::Full;
        let ln = |tape: &mut Tape<T>, data: Vec<T>| tape.leaf(Tensor::new(vec![d], data).unwrap().requires_grad(train_ln));
        let ln1_gamma = ln(tape, snap.ln1_gamma)?;
        let ln1_beta = ln(tape, snap.ln1_beta)?;
        let ln2_gamma = ln(tape, snap.ln2_gamma)?;
        let ln2_beta = ln(tape, snap.ln2_beta)?;
        let mha = Mha::from_weights(
            tape,
            &format!("{name}.attn"),
            [snap.wq, snap.wk, snap.wv, snap.wo],
            cfg,
            mode,
            sp,
            rng,
        )?;
        let ffn = match mode {
            TuningMode::Sparse => FfnLayer::Routed(RoutedFfn::from_weights(
                tape,
                &format!("{name}.ffn"),
                snap.w_i,
                snap.w_o,
                cfg,
                sp,
                rng,
            )?),
            _ => FfnLayer::Dense(DenseFfn::from_weights(
                tape,
                &format!("{name}.ffn"),
                snap.w_i,
                snap.w_o,
                cfg,
                mode,
                rng,
            )?),
        };
        Ok(Self {
            name: name.to_owned(),
            cfg: cfg.clone(),
            sp: sp.clone(),
            mode,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
            mha,
            ffn,
        })
    }

    /// Extract base weights with adapters merged in.
    pub fn snapshot(&self, tape: &Tape<T>) -> BlockSnapshot<T> {
        let (w_i, w_o) = match &self.ffn {
            FfnLayer::Dense(f) => (f.w_i.merged_weight(tape), f.w_o.merged_weight(tape)),
            FfnLayer::Routed(f) => routed_merged(tape, f),
        };
        BlockSnapshot {
            wq: self.mha.wq.merged_weight(tape),
            wk: self.mha.wk.merged_weight(tape),
            wv: self.mha.wv.merged_weight(tape),
            wo: self.mha.wo.merged_weight(tape),
            w_i,
            w_o,
            ln1_gamma: tape.data(self.ln1_gamma).to_vec(),
            ln1_beta: tape.data(self.ln1_beta).to_vec(),
            ln2_gamma: tape.data(self.ln2_gamma).to_vec(),
            ln2_beta: tape.data(self.ln2_beta).to_vec(),
        }
    }

    /// Pre-norm residual forward over one sequence [n, d_model].
    pub fn forward(&mut self, tape: &mut Tape<T>, x: TensorId, causal: bool, step: Option<u64>) -> Result<BlockOutput> {
        let eps = self.cfg.ln_eps;
        let ln1 = tape.layer_norm(x, self.ln1_gamma, self.ln1_beta, eps)?;
        let mha = &mut self.mha;
        let attention = tape.module_scope("attention", |t| mha.forward(t, ln1, causal, step))?;
        let h = tape.add(x, attention.out)?;
        let ln2 = tape.layer_norm(h, self.ln2_gamma, self.ln2_beta, eps)?;
        let ffn = &self.ffn;
        let (ffn_out, routing) = tape.module_scope("ffn", |t| -> Result<_> {
            match ffn {
                FfnLayer::Dense(f) => Ok((f.forward(t, ln2)?, None)),
                FfnLayer::Routed(f) => {
                    let FfnOutput { out, router_logits, routing } = f.forward(t, ln2)?;
                    Ok((out, Some((router_logits, routing))))
                }
            }
        })?;
        let out = tape.add(h, ffn_out)?;
        Ok(BlockOutput { out, attention, routing })
    }

    /// Router balance penalty for a forward pass, when routed.
    pub fn balance_loss(&self, tape: &mut Tape<T>, output: &BlockOutput) -> Result<Option<TensorId>> {
        match (&self.ffn, &output.routing) {
            (FfnLayer::Routed(f), Some((logits, routing))) => Ok(Some(f.balance_loss(tape, *logits, routing)?)),
            _ => Ok(None),
        }
    }

    /// Every leaf this block registered on the tape.
    pub fn owned_ids(&self) -> Vec<TensorId> {
        let mut ids = vec![self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta];
        for lin in self.mha.linears() {
            ids.push(lin.w);
            ids.extend(lin.adapter_ids());
        }
        match &self.ffn {
            FfnLayer::Dense(f) => {
                for lin in [&f.w_i, &f.w_o] {
                    ids.push(lin.w);
                    ids.extend(lin.adapter_ids());
                }
            }
            FfnLayer::Routed(f) => {
                ids.extend(f.w_i_blocks.iter().copied());
                ids.extend(f.w_o_blocks.iter().copied());
                ids.push(f.w_r);
                ids.extend([f.adapters.b_i, f.adapters.c_i, f.adapters.b_o, f.adapters.c_o]);
            }
        }
        ids
    }

    /// Total parameters that receive gradients, excluding codebooks.
    pub fn trainable_params(&self, tape: &Tape<T>) -> usize {
        self.owned_ids()
            .into_iter()
            .filter(|&id| tape.value(id).grad_required())
            .map(|id| tape.value(id).numel())
            .sum()
    }

    /// Codebook parameters (updated by refresh, not by gradients):
    /// E * d_head for the layer's shared word set. Zero outside sparse mode.
    pub fn codebook_params(&self) -> usize {
        match &self.mha.sparse {
            None => 0,
            Some(st) => match &st.cb {
                Some(cb) => cb.param_count(),
                None => st.n_words * self.cfg.d_head(),
            },
        }
    }

    /// Adapter factor sites for checkpointing, in layer order.
    pub fn sites(&self) -> Vec<AdapterSite> {
        let mut sites: Vec<AdapterSite> = self.mha.linears().iter().filter_map(|l| l.site()).collect();
        match &self.ffn {
            FfnLayer::Dense(f) => sites.extend([&f.w_i, &f.w_o].iter().filter_map(|l| l.site())),
            FfnLayer::Routed(f) => sites.extend(f.sites()),
        }
        sites
    }
}

/// Reassemble the dense feed-forward matrices from a routed layer,
/// merging the factored corrections.
fn routed_merged<T: Element>(tape: &Tape<T>, f: &RoutedFfn) -> (Tensor<T>, Tensor<T>) {
    let (d, big_d, g) = (f.d_model, f.d_ffn, f.n_groups);
    let width = big_d / g;
    let mut wi = vec![T::zero(); d * big_d];
    for blk in 0..g {
        let data = tape.data(f.w_i_blocks[blk]);
        for row in 0..d {
            wi[row * big_d + blk * width..row * big_d + (blk + 1) * width]
                .copy_from_slice(&data[row * width..(row + 1) * width]);
        }
    }
    kernels::matmul_nn(tape.data(f.adapters.b_i), tape.data(f.adapters.c_i), &mut wi, d, f.adapters.rank, big_d);
    let mut wo = vec![T::zero(); big_d * d];
    for blk in 0..g {
        wo[blk * width * d..(blk + 1) * width * d].copy_from_slice(tape.data(f.w_o_blocks[blk]));
    }
    kernels::matmul_nn(tape.data(f.adapters.b_o), tape.data(f.adapters.c_o), &mut wo, big_d, f.adapters.rank, d);
    (
        Tensor::new(vec![d, big_d], wi).expect("input matrix dims are consistent"),
        Tensor::new(vec![big_d, d], wo).expect("output matrix dims are consistent"),
    )
}
