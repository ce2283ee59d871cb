//! Low-rank adapters for frozen linear maps.
//!
//! A linear layer is either a plain weight `W` or a frozen `W` plus a
//! trainable rank-r correction `B @ C`. The correction is applied in
//! factored form — `(X @ B) @ C` — so the combined matrix is never
//! materialized during training; `merged_weight` builds `W + B @ C`
//! explicitly for export or evaluation. `C` starts at zero, so an adapted
//! layer is exactly its base layer until the first optimizer step.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{kernels, Element, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Gaussian width for the down-projection factor at init.
pub const FACTOR_INIT_STD: f64 = 0.02;

pub const ADAPTER_CHECKPOINT_VERSION: u32 = 1;

/// Trainable factor pair: `b` is [d_in, rank], `c` is [rank, d_out].
#[derive(Clone, Copy, Debug)]
pub struct LoraPair {
    pub b: TensorId,
    pub c: TensorId,
    pub rank: usize,
}

/// A named linear layer registered on a tape, optionally adapted.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub name: String,
    pub w: TensorId,
    pub factors: Option<LoraPair>,
}

impl LoraLinear {
    /// Register a plain linear layer. Trainability follows the tensor's
    /// `requires_grad` flag, so callers decide full-tuning vs frozen.
    pub fn base<T: Element>(tape: &mut Tape<T>, name: &str, w: Tensor<T>) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::Config(format!("linear weight {name} must be 2-d, got {:?}", w.shape())));
        }
        let w = tape.leaf(w)?;
        Ok(Self { name: name.to_owned(), w, factors: None })
    }

    /// Register a frozen base weight plus fresh rank-`rank` factors.
    pub fn adapted<T: Element>(
        tape: &mut Tape<T>,
        name: &str,
        w: Tensor<T>,
        rank: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config(format!("adapter rank for {name} must be >= 1")));
        }
        if w.shape().len() != 2 {
            return Err(Error::Config(format!("linear weight {name} must be 2-d, got {:?}", w.shape())));
        }
        let (d_in, d_out) = (w.rows(), w.cols());
        let w = tape.leaf(w.requires_grad(false))?;
        let b = Tensor::randn(vec![d_in, rank], FACTOR_INIT_STD, &mut rng.split_str(&format!("{name}.b")))
            .requires_grad(true);
        let c = Tensor::<T>::zeros(vec![rank, d_out]).requires_grad(true);
        let b = tape.leaf(b)?;
        let c = tape.leaf(c)?;
        Ok(Self { name: name.to_owned(), w, factors: Some(LoraPair { b, c, rank }) })
    }

    /// `X @ W` plus, when adapted, the factored correction `(X @ B) @ C`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let y = tape.matmul(x, self.w)?;
        match self.factors {
            None => Ok(y),
            Some(f) => {
                let xb = tape.matmul(x, f.b)?;
                let xbc = tape.matmul(xb, f.c)?;
                tape.add(y, xbc)
            }
        }
    }

    /// Materialize `W + B @ C` (or a copy of `W` when not adapted).
    pub fn merged_weight<T: Element>(&self, tape: &Tape<T>) -> Tensor<T> {
        let w = tape.value(self.w);
        let mut out = w.data().to_vec();
        if let Some(f) = self.factors {
            let (d_in, d_out) = (w.rows(), w.cols());
            kernels::matmul_nn(tape.data(f.b), tape.data(f.c), &mut out, d_in, f.rank, d_out);
        }
        Tensor::new(w.shape().to_vec(), out).expect("merged weight keeps the base shape")
    }

    /// Ids of the trainable factor tensors, in optimizer order.
    pub fn adapter_ids(&self) -> Vec<TensorId> {
        self.factors.map(|f| vec![f.b, f.c]).unwrap_or_default()
    }

    /// This layer's factors as a checkpointable site, when adapted.
    pub fn site(&self) -> Option<AdapterSite> {
        self.factors.map(|pair| AdapterSite { name: self.name.clone(), pair })
    }

    /// Trainable adapter parameters: rank * (d_in + d_out); 0 when plain.
    pub fn adapter_param_count<T: Element>(&self, tape: &Tape<T>) -> usize {
        match self.factors {
            None => 0,
            Some(f) => tape.value(f.b).numel() + tape.value(f.c).numel(),
        }
    }

    pub fn in_dim<T: Element>(&self, tape: &Tape<T>) -> usize {
        tape.value(self.w).rows()
    }

    pub fn out_dim<T: Element>(&self, tape: &Tape<T>) -> usize {
        tape.value(self.w).cols()
    }
}

/// A named factor pair somewhere in a model — the unit of adapter
/// checkpointing. Layers that aren't plain `LoraLinear`s (for example a
/// block-sliced feed-forward base) can still expose their factors as sites.
#[derive(Clone, Debug)]
pub struct AdapterSite {
    pub name: String,
    pub pair: LoraPair,
}

/// One adapted layer's factors, keyed by layer name. Values are stored as
/// f64, which roundtrips both element types exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub name: String,
    pub d_in: usize,
    pub rank: usize,
    pub d_out: usize,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Adapter-only checkpoint: factor matrices for every adapted layer and
/// nothing from the frozen base model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub version: u32,
    pub entries: Vec<AdapterEntry>,
}

/// Gather factors from every adapter site into a checkpoint.
pub fn collect_adapters<T: Element>(tape: &Tape<T>, sites: &[AdapterSite]) -> AdapterCheckpoint {
    let mut entries = Vec::new();
    for site in sites {
        let f = site.pair;
        entries.push(AdapterEntry {
            name: site.name.clone(),
            d_in: tape.value(f.b).rows(),
            rank: f.rank,
            d_out: tape.value(f.c).cols(),
            b: tape.data(f.b).iter().map(|v| v.as_f64()).collect(),
            c: tape.data(f.c).iter().map(|v| v.as_f64()).collect(),
        });
    }
    AdapterCheckpoint { version: ADAPTER_CHECKPOINT_VERSION, entries }
}

/// Write checkpointed factors back into the matching sites.
///
/// Every site must find an entry of the same name and shape, and every
/// entry must find its site; anything else is a checkpoint error.
pub fn apply_adapters<T: Element>(tape: &mut Tape<T>, sites: &[AdapterSite], ckpt: &AdapterCheckpoint) -> Result<()> {
    if ckpt.version != ADAPTER_CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "adapter checkpoint version {} unsupported (expected {})",
            ckpt.version, ADAPTER_CHECKPOINT_VERSION
        )));
    }
    let mut used = vec![false; ckpt.entries.len()];
    for site in sites {
        let f = site.pair;
        let pos = ckpt
            .entries
            .iter()
            .position(|e| e.name == site.name)
            .ok_or_else(|| Error::Checkpoint(format!("no adapter entry for layer {}", site.name)))?;
        let entry = &ckpt.entries[pos];
        used[pos] = true;
        let (d_in, d_out) = (tape.value(f.b).rows(), tape.value(f.c).cols());
        if (entry.d_in, entry.rank, entry.d_out) != (d_in, f.rank, d_out)
            || entry.b.len() != d_in * f.rank
            || entry.c.len() != f.rank * d_out
        {
            return Err(Error::Checkpoint(format!(
                "adapter entry {} has shape ({}, {}, {}), layer expects ({}, {}, {})",
                entry.name, entry.d_in, entry.rank, entry.d_out, d_in, f.rank, d_out
            )));
        }
        for (dst, src) in tape.leaf_data_mut(f.b).iter_mut().zip(&entry.b) {
            *dst = T::of(*src);
        }
        for (dst, src) in tape.leaf_data_mut(f.c).iter_mut().zip(&entry.c) {
            *dst = T::of(*src);
        }
    }
    if let Some(pos) = used.iter().position(|u| !u) {
        return Err(Error::Checkpoint(format!(
            "adapter entry {} matches no adapter site",
            ckpt.entries[pos].name
        )));
    }
    Ok(())
}

/// Serialize a checkpoint to pretty JSON on disk.
pub fn save_adapters(path: &Path, ckpt: &AdapterCheckpoint) -> Result<()> {
    let body = serde_json::to_vec_pretty(ckpt)
        .map_err(|e| Error::Checkpoint(format!("adapter serialization failed: {e}")))?;
    std::fs::write(path, body)?;
    Ok(())
}

/// Read a checkpoint written by `save_adapters`.
pub fn load_adapters(path: &Path) -> Result<AdapterCheckpoint> {
    let body = std::fs::read(path)?;
    serde_json::from_slice(&body).map_err(|e| Error::Checkpoint(format!("adapter parse failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_diff(a: f64, b: f64) -> f64 {
        (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
    }

    fn setup(rank: usize) -> (Tape<f64>, LoraLinear, TensorId) {
        let mut rng = SeedRng::new(11);
        let mut tape = Tape::new();
        let w = Tensor::randn(vec![4, 5], 0.5, &mut rng.split_str("w"));
        let layer = LoraLinear::adapted(&mut tape, "proj", w, rank, &mut rng).unwrap();
        let x = tape
            .leaf(Tensor::randn(vec![3, 4], 1.0, &mut rng.split_str("x")))
            .unwrap();
        (tape, layer, x)
    }

    #[test]
    fn fresh_adapter_is_exactly_the_base_layer() {
        let (mut tape, layer, x) = setup(2);
        let adapted = layer.forward(&mut tape, x).unwrap();
        let plain = tape.matmul(x, layer.w).unwrap();
        assert_eq!(tape.data(adapted), tape.data(plain), "zero C must change nothing");
    }

    #[test]
    fn merged_weight_matches_factored_forward() {
        let (mut tape, layer, x) = setup(2);
        let mut rng = SeedRng::new(42);
        for v in tape.leaf_data_mut(layer.factors.unwrap().b) {
            *v = rng.normal_f64();
        }
        for v in tape.leaf_data_mut(layer.factors.unwrap().c) {
            *v = rng.normal_f64();
        }
        let factored = layer.forward(&mut tape, x).unwrap();
        let merged = layer.merged_weight(&tape);
        let wm = tape.leaf(merged).unwrap();
        let direct = tape.matmul(x, wm).unwrap();
        for (a, b) in tape.data(factored).iter().zip(tape.data(direct)) {
            assert!(rel_diff(*a, *b) < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_flops_are_base_plus_factor_cost() {
        let (mut tape, layer, x) = setup(2);
        let (_, c) = tape.counters_scope(|t| layer.forward(t, x).unwrap());
        let (n, d, h, r) = (3u64, 4u64, 5u64, 2u64);
        assert_eq!(c.flops, n * d * h + n * r * (d + h));
    }

    #[test]
    fn frozen_base_receives_no_gradient() {
        let (mut tape, layer, x) = setup(2);
        let mut rng = SeedRng::new(9);
        for v in tape.leaf_data_mut(layer.factors.unwrap().b) {
            *v = rng.normal_f64();
        }
        let y = layer.forward(&mut tape, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(layer.w).is_none(), "frozen base must stay gradient-free");
        let f = layer.factors.unwrap();
        assert!(tape.grad(f.b).is_some());
        let gc = tape.grad(f.c).unwrap();
        assert!(gc.iter().any(|g| *g != 0.0), "C gradient must flow through random B");
    }

    #[test]
    fn adapter_param_count_is_rank_times_dim_sum() {
        let (tape, layer, _) = setup(3);
        assert_eq!(layer.adapter_param_count(&tape), 3 * (4 + 5));
        assert_eq!(layer.adapter_ids().len(), 2);
    }

    #[test]
    fn zero_rank_is_rejected() {
        let mut rng = SeedRng::new(1);
        let mut tape = Tape::<f64>::new();
        let w = Tensor::randn(vec![2, 2], 0.1, &mut rng);
        assert!(matches!(
            LoraLinear::adapted(&mut tape, "p", w, 0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrips_bitwise_and_rejects_mismatches() {
        let (mut tape, layer, _) = setup(2);
        let mut rng = SeedRng::new(3);
        for v in tape.leaf_data_mut(layer.factors.unwrap().b) {
            *v = rng.normal_f64();
        }
        for v in tape.leaf_data_mut(layer.factors.unwrap().c) {
            *v = rng.normal_f64();
        }
        let sites: Vec<AdapterSite> = layer.site().into_iter().collect();
        let ckpt = collect_adapters(&tape, &sites);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.json");
        save_adapters(&path, &ckpt).unwrap();

        let before_b = tape.data(layer.factors.unwrap().b).to_vec();
        let before_c = tape.data(layer.factors.unwrap().c).to_vec();
        for v in tape.leaf_data_mut(layer.factors.unwrap().b) {
            *v = 0.0;
        }
        for v in tape.leaf_data_mut(layer.factors.unwrap().c) {
            *v = 0.0;
        }
        let loaded = load_adapters(&path).unwrap();
        apply_adapters(&mut tape, &sites, &loaded).unwrap();
        assert_eq!(tape.data(layer.factors.unwrap().b), &before_b[..], "factors must roundtrip bitwise");
        assert_eq!(tape.data(layer.factors.unwrap().c), &before_c[..]);

        let mut renamed = loaded.clone();
        renamed.entries[0].name = "other".into();
        assert!(matches!(apply_adapters(&mut tape, &sites, &renamed), Err(Error::Checkpoint(_))));

        let mut bad_shape = loaded.clone();
        bad_shape.entries[0].rank = 7;
        assert!(matches!(apply_adapters(&mut tape, &sites, &bad_shape), Err(Error::Checkpoint(_))));

        let mut bad_version = loaded;
        bad_version.version = 99;
        assert!(matches!(apply_adapters(&mut tape, &sites, &bad_version), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_excludes_plain_layers() {
        let mut rng = SeedRng::new(4);
        let mut tape = Tape::<f64>::new();
        let plain = LoraLinear::base(&mut tape, "head", Tensor::randn(vec![3, 3], 0.1, &mut rng)).unwrap();
        let adapted =
            LoraLinear::adapted(&mut tape, "proj", Tensor::randn(vec![3, 3], 0.1, &mut rng), 1, &mut rng).unwrap();
        let sites: Vec<AdapterSite> = [&plain, &adapted].iter().filter_map(|l| l.site()).collect();
        let ckpt = collect_adapters(&tape, &sites);
        assert_eq!(ckpt.entries.len(), 1);
        assert_eq!(ckpt.entries[0].name, "proj");
    }
}
