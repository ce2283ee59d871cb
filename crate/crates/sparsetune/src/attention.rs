//! Multi-head attention with optional quantized top-L key selection.
//!
//! All four projections are adapter-wrapped linears. In sparse mode each
//! head quantizes its query/key rows with the layer's shared codebooks,
//! keeps the L = max(1, floor(lambda*n)) keys with the highest indicator
//! score, and runs the sampled-product / sparse-softmax / sparse-matmul
//! trio over the resulting CSR pattern. Dense mode runs the same trio over
//! the full (or lower-triangular) pattern, so both paths share one kernel
//! set and one cost-accounting convention.

use std::rc::Rc;

use crate::config::{BlockConfig, SparsityConfig, TuningMode};
use crate::csr::CsrPattern;
use crate::error::{Error, Result};
use crate::lora::LoraLinear;
use crate::pq::Codebooks;
use crate::rng::SeedRng;
use crate::tensor::{Element, Tape, Tensor, TensorId};
use crate::topl::select_topl;

/// Quantization and selection state for one attention layer. One codebook
/// set serves the whole layer — every head, queries and keys alike — so
/// that "mapped to the same codeword" means "nearby in the shared space",
/// which is what makes codeword overlap a proxy for a large inner product.
/// Initialization is lazy, from the first batch that flows through, so the
/// words start on real activations.
#[derive(Clone, Debug)]
pub struct SparseAttentionState<T: Element> {
    pub cb: Option<Codebooks<T>>,
    pub lambda: f64,
    pub n_words: usize,
    pub d_sub: usize,
    pub refresh_period: u64,
    pub causal_at_softmax: bool,
    rng: SeedRng,
}

/// One attention layer's weights plus optional sparse machinery.
pub struct Mha<T: Element> {
    pub name: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub scale_scores: bool,
    pub wq: LoraLinear,
    pub wk: LoraLinear,
    pub wv: LoraLinear,
    pub wo: LoraLinear,
    pub sparse: Option<SparseAttentionState<T>>,
}

/// What a forward pass produced, beyond the output activations.
pub struct AttentionOutput {
    pub out: TensorId,
    /// Per-head attention patterns, in head order.
    pub patterns: Vec<Rc<CsrPattern>>,
    /// Per-head post-softmax probability values over the pattern entries.
    pub probs: Vec<TensorId>,
    /// Stored probability entries summed over heads.
    pub stored_entries: usize,
    /// L used this call (None on the dense path).
    pub keys_kept: Option<usize>,
    /// Mean squared quantization error over query and key rows, when sparse.
    pub quantization_error: Option<f64>,
    /// Whether this call ran a codebook refresh.
    pub refreshed: bool,
}

impl<T: Element> Mha<T> {
    /// Fresh randomly initialized attention layer.
    pub fn new(
        tape: &mut Tape<T>,
        name: &str,
        cfg: &BlockConfig,
        mode: TuningMode,
        sp: &SparsityConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let w = |rng: &mut SeedRng, role: &str| {
            Tensor::randn(vec![d, d], cfg.init_std, &mut rng.split_str(&format!("{name}.{role}")))
        };
        let (wq, wk, wv, wo) = (w(rng, "wq"), w(rng, "wk"), w(rng, "wv"), w(rng, "wo"));
        Self::from_weights(tape, name, [wq, wk, wv, wo], cfg, mode, sp, rng)
    }

    /// Build a layer around existing projection weights (base-model import
    /// or mode switching). Order is query, key, value, output.
    pub fn from_weights(
        tape: &mut Tape<T>,
        name: &str,
        weights: [Tensor<T>; 4],
        cfg: &BlockConfig,
        mode: TuningMode,
        sp: &SparsityConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        sp.validate(cfg)?;
        let d = cfg.d_model;
        for w in &weights {
            if w.shape() != [d, d] {
                return Err(Error::Config(format!(
                    "attention projection must be [{d}, {d}], got {:?}",
                    w.shape()
                )));
            }
        }
        let [q, k, v, o] = weights;
        let register = |tape: &mut Tape<T>, rng: &mut SeedRng, role: &str, w: Tensor<T>| match mode {
            TuningMode::Full => LoraLinear::base(tape, &format!("{name}.{role}"), w.requires_grad(true)),
            TuningMode::Lora | TuningMode::Sparse => {
                LoraLinear::adapted(tape, &format!("{name}.{role}"), w, cfg.rank, rng)
            }
        };
        let wq = register(tape, rng, "wq", q)?;
        let wk = register(tape, rng, "wk", k)?;
        let wv = register(tape, rng, "wv", v)?;
        let wo = register(tape, rng, "wo", o)?;
        let sparse = (mode == TuningMode::Sparse).then(|| SparseAttentionState {
            cb: None,
            lambda: sp.lambda,
            n_words: sp.n_words,
            d_sub: sp.d_sub,
            refresh_period: sp.refresh_period,
            causal_at_softmax: sp.causal_at_softmax,
            rng: rng.split_str(&format!("{name}.codebooks")),
        });
        Ok(Self {
            name: name.to_owned(),
            d_model: d,
            n_heads: cfg.n_heads,
            d_head: cfg.d_head(),
            scale_scores: sp.scale_scores,
            wq,
            wk,
            wv,
            wo,
            sparse,
        })
    }

    pub fn linears(&self) -> [&LoraLinear; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    /// Attend over one sequence `x` of shape [n, d_model]. `step` drives
    /// the periodic codebook refresh; pass None outside training.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: TensorId,
        causal: bool,
        step: Option<u64>,
    ) -> Result<AttentionOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "attention",
                detail: format!("input {:?} for model width {}", shape, self.d_model),
            });
        }
        let n = shape[0];
        let (heads, dh) = (self.n_heads, self.d_head);

        let q = self.wq.forward(tape, x)?;
        let k = self.wk.forward(tape, x)?;
        let v = self.wv.forward(tape, x)?;
        let mut qh = Vec::with_capacity(heads);
        let mut kh = Vec::with_capacity(heads);
        let mut vh = Vec::with_capacity(heads);
        for h in 0..heads {
            qh.push(tape.slice_cols(q, h * dh, dh)?);
            kh.push(tape.slice_cols(k, h * dh, dh)?);
            vh.push(tape.slice_cols(v, h * dh, dh)?);
        }

        // Resolve each head's attention pattern (plus optional entry mask).
        let mut patterns: Vec<Rc<CsrPattern>> = Vec::with_capacity(heads);
        let mut masks: Vec<Option<Vec<bool>>> = Vec::with_capacity(heads);
        let mut keys_kept = None;
        let mut quant_err = None;
        let mut refreshed = false;

        if let Some(st) = self.sparse.as_mut() {
            let l = ((st.lambda * n as f64).floor() as usize).max(1);
            keys_kept = Some(l);

            // Stack every head's query and key rows so the shared codebooks
            // see the layer-wide distribution of head-width vectors.
            let mut union = Vec::with_capacity(2 * n * heads * dh);
            for parts in [&qh, &kh] {
                for &p in parts.iter() {
                    union.extend_from_slice(tape.data(p));
                }
            }
            let union = Tensor::new(vec![2 * n * heads, dh], union)?;
            if st.cb.is_none() {
                st.cb = Some(Codebooks::init(&union, st.d_sub, st.n_words, &mut st.rng)?);
            } else if let Some(step) = step {
                refreshed = st.cb.as_mut().unwrap().update_codebooks(&union, step, st.refresh_period)?;
            }
            let cb = st.cb.as_ref().unwrap();
            let assign_cost = (n * dh * st.n_words) as u64;
            let prefilter = causal && !st.causal_at_softmax;
            let mut err_sum = 0.0;

            for h in 0..heads {
                let qt = Tensor::new(vec![n, dh], tape.data(qh[h]).to_vec())?;
                let kt = Tensor::new(vec![n, dh], tape.data(kh[h]).to_vec())?;
                let cq = cb.assign_codes(&qt)?;
                let ck = cb.assign_codes(&kt)?;
                tape.add_flops("pq_assign", 2 * assign_cost);
                err_sum += cb.quantization_error(&qt, &cq)?.as_f64();
                err_sum += cb.quantization_error(&kt, &ck)?.as_f64();

                let sel = select_topl(&cq, &ck, l, prefilter)?;
                tape.add_flops("topl_select", sel.candidates_scanned);
                let pat = Rc::new(sel.build_csr());
                let mask = (causal && st.causal_at_softmax).then(|| {
                    let mut keep = Vec::with_capacity(pat.nnz());
                    for i in 0..pat.n_rows {
                        keep.extend(pat.row(i).iter().map(|&j| j <= i));
                    }
                    keep
                });
                patterns.push(pat);
                masks.push(mask);
            }
            quant_err = Some(err_sum / (2 * heads) as f64);
        } else {
            let pat = Rc::new(if causal {
                let rows: Vec<Vec<usize>> = (0..n).map(|i| (0..=i).collect()).collect();
                CsrPattern::from_rows(n, &rows)?
            } else {
                CsrPattern::full(n, n)
            });
            for _ in 0..heads {
                patterns.push(pat.clone());
                masks.push(None);
            }
        }

        // The shared trio: sampled scores, row softmax, weighted values.
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out_heads = Vec::with_capacity(heads);
        let mut head_probs = Vec::with_capacity(heads);
        let mut stored = 0usize;
        for h in 0..heads {
            let pat = patterns[h].clone();
            let mut scores = tape.sddmm(qh[h], kh[h], pat.clone())?;
            if self.scale_scores {
                scores = tape.scale(scores, scale)?;
            }
            let probs = tape.sparse_row_softmax(scores, pat.clone(), masks[h].as_deref())?;
            head_probs.push(probs);
            out_heads.push(tape.spmm(probs, vh[h], pat.clone())?);
            stored += pat.nnz();
            tape.count_attention_entries(pat.nnz() as u64);
        }
        let merged = tape.concat_cols(&out_heads)?;
        let out = self.wo.forward(tape, merged)?;
        Ok(AttentionOutput {
            out,
            patterns,
            probs: head_probs,
            stored_entries: stored,
            keys_kept,
            quantization_error: quant_err,
            refreshed,
        })
    }
}
