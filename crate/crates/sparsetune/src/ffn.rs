//! Feed-forward layers: the dense two-matrix form and the group-routed
//! form used for sparse tuning.
//!
//! The routed layer splits the hidden width D into G equal neuron groups.
//! A linear router scores each token; the max(1, round(beta*G)) groups
//! with the largest absolute score stay active (lower index wins ties).
//! Tokens are batched per group — gather, two block matmuls, scale by the
//! sigmoid router gate, scatter-add back — so compute scales with the
//! number of (token, group) activations, exactly beta * 2ndD for the block
//! matmuls. When every group is active the gates are left at one, making
//! the routed layer coincide with the dense one.

use crate::config::{Activation, BlockConfig, SparsityConfig, TuningMode};
use crate::error::{Error, Result};
use crate::lora::{AdapterSite, LoraLinear, LoraPair};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tape, Tensor, TensorId};

/// Plain (or adapter-wrapped) two-matrix feed-forward layer.
pub struct DenseFfn {
    pub w_i: LoraLinear,
    pub w_o: LoraLinear,
    pub activation: Activation,
}

impl DenseFfn {
    pub fn new<T: Element>(
        tape: &mut Tape<T>,
        name: &str,
        cfg: &BlockConfig,
        mode: TuningMode,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let w_i = Tensor::randn(vec![cfg.d_model, cfg.d_ffn], cfg.init_std, &mut rng.split_str(&format!("{name}.in")));
        let w_o = Tensor::randn(vec![cfg.d_ffn, cfg.d_model], cfg.init_std, &mut rng.split_str(&format!("{name}.out")));
        Self::from_weights(tape, name, w_i, w_o, cfg, mode, rng)
    }

    /// Wrap existing weights; `mode` decides plain-trainable vs adapted.
    pub fn from_weights<T: Element>(
        tape: &mut Tape<T>,
        name: &str,
        w_i: Tensor<T>,
        w_o: Tensor<T>,
        cfg: &BlockConfig,
        mode: TuningMode,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if w_i.shape() != [cfg.d_model, cfg.d_ffn] || w_o.shape() != [cfg.d_ffn, cfg.d_model] {
            return Err(Error::Config(format!(
                "feed-forward weights must be [{}, {}] and [{}, {}], got {:?} and {:?}",
                cfg.d_model,
                cfg.d_ffn,
                cfg.d_ffn,
                cfg.d_model,
                w_i.shape(),
                w_o.shape()
            )));
        }
        let (w_i, w_o) = match mode {
            TuningMode::Full => (
                LoraLinear::base(tape, &format!("{name}.in"), w_i.requires_grad(true))?,
                LoraLinear::base(tape, &format!("{name}.out"), w_o.requires_grad(true))?,
            ),
            TuningMode::Lora => (
                LoraLinear::adapted(tape, &format!("{name}.in"), w_i, cfg.rank, rng)?,
                LoraLinear::adapted(tape, &format!("{name}.out"), w_o, cfg.rank, rng)?,
            ),
            TuningMode::Sparse => {
                return Err(Error::Config("sparse tuning uses the routed feed-forward layer".into()))
            }
        };
        Ok(Self { w_i, w_o, activation: cfg.activation })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let h = self.w_i.forward(tape, x)?;
        let a = apply_activation(tape, self.activation, h)?;
        self.w_o.forward(tape, a)
    }
}

fn apply_activation<T: Element>(tape: &mut Tape<T>, act: Activation, x: TensorId) -> Result<TensorId> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}

/// Which groups each token activated on one forward pass.
#[derive(Clone, Debug)]
pub struct Routing {
    pub n_tokens: usize,
    pub groups_active: usize,
    /// Rows assigned to each group, ascending within a group.
    pub assignments: Vec<Vec<usize>>,
    /// `assignments[g].len()` for each group — the activation histogram.
    pub counts: Vec<usize>,
}

impl Routing {
    /// Coefficient of variation of the activation histogram (0 = perfectly
    /// balanced). Used to compare training with and without the penalty.
    pub fn count_cv(&self) -> f64 {
        let g = self.counts.len() as f64;
        let mean = self.counts.iter().sum::<usize>() as f64 / g;
        if mean == 0.0 {
            return 0.0;
        }
        let var = self.counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / g;
        var.sqrt() / mean
    }
}

/// Forward-pass products the caller may need beyond the activations.
pub struct FfnOutput {
    pub out: TensorId,
    /// Router logits [n, G]; feed to `RoutedFfn::balance_loss`.
    pub router_logits: TensorId,
    pub routing: Routing,
}

/// Group-routed feed-forward layer over a frozen, block-sliced base.
pub struct RoutedFfn {
    pub name: String,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_groups: usize,
    pub groups_active: usize,
    pub activation: Activation,
    pub gated: bool,
    /// Trainable router [d_model, G].
    pub w_r: TensorId,
    /// Frozen column blocks of the input matrix, each [d_model, D/G].
    pub w_i_blocks: Vec<TensorId>,
    /// Frozen row blocks of the output matrix, each [D/G, d_model].
    pub w_o_blocks: Vec<TensorId>,
    /// Factored corrections to the full input/output matrices.
    pub adapters: RoutedAdapters,
}

/// Adapter factors for the routed layer: the input correction is
/// `b_i @ c_i` ([d, r] @ [r, D]), the output correction `b_o @ c_o`
/// ([D, r] @ [r, d]). Group slices are taken at use, so the factors stay
/// whole matrices for checkpointing.
#[derive(Clone, Copy, Debug)]
pub struct RoutedAdapters {
    pub b_i: TensorId,
    pub c_i: TensorId,
    pub b_o: TensorId,
    pub c_o: TensorId,
    pub rank: usize,
}

impl RoutedFfn {
    pub fn new<T: Element>(
        tape: &mut Tape<T>,
        name: &str,
        cfg: &BlockConfig,
        sp: &SparsityConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let w_i = Tensor::randn(vec![cfg.d_model, cfg.d_ffn], cfg.init_std, &mut rng.split_str(&format!("{name}.in")));
        let w_o = Tensor::randn(vec![cfg.d_ffn, cfg.d_model], cfg.init_std, &mut rng.split_str(&format!("{name}.out")));
        Self::from_weights(tape, name, w_i, w_o, cfg, sp, rng)
    }

    /// Slice dense weights into group blocks and attach router + adapters.
    pub fn from_weights<T: Element>(
        tape: &mut Tape<T>,
        name: &str,
        w_i: Tensor<T>,
        w_o: Tensor<T>,
        cfg: &BlockConfig,
        sp: &SparsityConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        sp.validate(cfg)?;
        let (d, big_d, g) = (cfg.d_model, cfg.d_ffn, sp.n_groups);
        if w_i.shape() != [d, big_d] || w_o.shape() != [big_d, d] {
            return Err(Error::Config(format!(
                "feed-forward weights must be [{d}, {big_d}] and [{big_d}, {d}], got {:?} and {:?}",
                w_i.shape(),
                w_o.shape()
            )));
        }
        let width = big_d / g;

        let mut w_i_blocks = Vec::with_capacity(g);
        for blk in 0..g {
            let mut data = Vec::with_capacity(d * width);
            for row in 0..d {
                let base = row * big_d + blk * width;
                data.extend_from_slice(&w_i.data()[base..base + width]);
            }
            w_i_blocks.push(tape.leaf(Tensor::new(vec![d, width], data)?)?);
        }
        let mut w_o_blocks = Vec::with_capacity(g);
        for blk in 0..g {
            let data = w_o.data()[blk * width * d..(blk + 1) * width * d].to_vec();
            w_o_blocks.push(tape.leaf(Tensor::new(vec![width, d], data)?)?);
        }

        let w_r = tape.leaf(
            Tensor::randn(vec![d, g], cfg.init_std, &mut rng.split_str(&format!("{name}.router"))).requires_grad(true),
        )?;
        let r = cfg.rank;
        let gaussian = |tape: &mut Tape<T>, rng: &mut SeedRng, label: String, shape: Vec<usize>| {
            let t = Tensor::randn(shape, crate::lora::FACTOR_INIT_STD, &mut rng.split_str(&label)).requires_grad(true);
            tape.leaf(t)
        };
        let adapters = RoutedAdapters {
            b_i: gaussian(tape, rng, format!("{name}.in.b"), vec![d, r])?,
            c_i: tape.leaf(Tensor::<T>::zeros(vec![r, big_d]).requires_grad(true))?,
            b_o: gaussian(tape, rng, format!("{name}.out.b"), vec![big_d, r])?,
            c_o: tape.leaf(Tensor::<T>::zeros(vec![r, d]).requires_grad(true))?,
            rank: r,
        };
        Ok(Self {
            name: name.to_owned(),
            d_model: d,
            d_ffn: big_d,
            n_groups: g,
            groups_active: sp.groups_active(),
            activation: cfg.activation,
            gated: sp.gated,
            w_r,
            w_i_blocks,
            w_o_blocks,
            adapters,
        })
    }

    /// Decide groups per token from router logit values.
    fn route<T: Element>(&self, logits: &[T], n: usize) -> Routing {
        let g = self.n_groups;
        let take = self.groups_active.min(g);
        let mut assignments = vec![Vec::new(); g];
        let mut order: Vec<usize> = Vec::with_capacity(g);
        for row in 0..n {
            order.clear();
            order.extend(0..g);
            let vals = &logits[row * g..(row + 1) * g];
            order.sort_by(|&a, &b| {
                vals[b]
                    .as_f64()
                    .abs()
                    .partial_cmp(&vals[a].as_f64().abs())
                    .expect("router logits are finite")
                    .then(a.cmp(&b))
            });
            for &grp in &order[..take] {
                assignments[grp].push(row);
            }
        }
        let counts = assignments.iter().map(Vec::len).collect();
        Routing { n_tokens: n, groups_active: take, assignments, counts }
    }

    /// Routed forward pass over `x` of shape [n, d_model].
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: TensorId) -> Result<FfnOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "routed_ffn",
                detail: format!("input {:?} for model width {}", shape, self.d_model),
            });
        }
        let n = shape[0];
        let (g, width) = (self.n_groups, self.d_ffn / self.n_groups);

        let logits = tape.matmul(x, self.w_r)?;
        let routing = self.route(tape.data(logits), n);

        // Gates stay at one when every group is active, so beta = 1
        // reproduces the dense layer exactly.
        let gates = (self.gated && routing.groups_active < g)
            .then(|| tape.sigmoid(logits))
            .transpose()?;

        let mut out: Option<TensorId> = None;
        for blk in 0..g {
            let rows = routing.assignments[blk].clone();
            if rows.is_empty() {
                continue;
            }
            let gate_idx: Vec<usize> = rows.iter().map(|&row| row * g + blk).collect();
            let xg = tape.gather_rows(x, rows.clone())?;
            let mut h = tape.matmul(xg, self.w_i_blocks[blk])?;
            let xb = tape.matmul(xg, self.adapters.b_i)?;
            let ci_blk = tape.slice_cols(self.adapters.c_i, blk * width, width)?;
            let h_corr = tape.matmul(xb, ci_blk)?;
            h = tape.add(h, h_corr)?;
            let a = apply_activation(tape, self.activation, h)?;

            let mut y = tape.matmul(a, self.w_o_blocks[blk])?;
            let bo_blk = tape.gather_rows(self.adapters.b_o, (blk * width..(blk + 1) * width).collect())?;
            let ab = tape.matmul(a, bo_blk)?;
            let y_corr = tape.matmul(ab, self.adapters.c_o)?;
            y = tape.add(y, y_corr)?;

            if let Some(gt) = gates {
                let gv = tape.gather_scalars(gt, gate_idx)?;
                y = tape.scale_rows(y, gv)?;
            }
            let scattered = tape.scatter_rows(y, rows, n)?;
            out = Some(match out {
                None => scattered,
                Some(acc) => tape.add(acc, scattered)?,
            });
        }
        let out = out.expect("every token activates at least one group");
        Ok(FfnOutput { out, router_logits: logits, routing })
    }

    /// Load-balance penalty: G * sum_g f_g * pbar_g, where f_g is group
    /// g's share of activations and pbar_g its mean router probability.
    /// Uniform routing gives exactly 1; full collapse approaches G.
    pub fn balance_loss<T: Element>(&self, tape: &mut Tape<T>, logits: TensorId, routing: &Routing) -> Result<TensorId> {
        let probs = tape.row_softmax(logits, None)?;
        let pbar = tape.col_mean(probs)?;
        let denom = (routing.n_tokens * routing.groups_active) as f64;
        let weights: Vec<T> = routing
            .counts
            .iter()
            .map(|&c| T::of(self.n_groups as f64 * c as f64 / denom))
            .collect();
        tape.weighted_sum(pbar, weights)
    }

    /// Trainable ids in optimizer order: router, then adapter factors.
    pub fn trainable_ids(&self) -> Vec<TensorId> {
        vec![self.w_r, self.adapters.b_i, self.adapters.c_i, self.adapters.b_o, self.adapters.c_o]
    }

    /// Adapter factors as checkpointable sites.
    pub fn sites(&self) -> Vec<AdapterSite> {
        let a = self.adapters;
        vec![
            AdapterSite { name: format!("{}.in", self.name), pair: LoraPair { b: a.b_i, c: a.c_i, rank: a.rank } },
            AdapterSite { name: format!("{}.out", self.name), pair: LoraPair { b: a.b_o, c: a.c_o, rank: a.rank } },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(d_model: usize, d_ffn: usize) -> BlockConfig {
        let mut cfg = BlockConfig::new(d_model, d_model, d_ffn, Activation::Relu).unwrap();
        cfg.rank = 2;
        cfg
    }

    fn weights(d: usize, big_d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let rng = SeedRng::new(seed);
        (
            Tensor::randn(vec![d, big_d], 0.4, &mut rng.split_str("wi")),
            Tensor::randn(vec![big_d, d], 0.4, &mut rng.split_str("wo")),
        )
    }

    #[test]
    fn dense_ffn_counts_two_matmuls() {
        let cfg = toy_cfg(4, 16);
        let mut rng = SeedRng::new(1);
        let mut tape = Tape::<f64>::new();
        let ffn = DenseFfn::new(&mut tape, "ffn", &cfg, TuningMode::Full, &mut rng).unwrap();
        let x = tape.leaf(Tensor::randn(vec![8, 4], 1.0, &mut rng)).unwrap();
        let (_, c) = tape.counters_scope(|t| ffn.forward(t, x).unwrap());
        assert_eq!(c.flops, 8 * 4 * 16 + 8 * 16 * 4, "n*d*D forward and n*D*d back out");
    }

    #[test]
    fn unit_beta_routed_matches_dense_weights() {
        let (d, big_d, n) = (4, 8, 5);
        let cfg = toy_cfg(d, big_d);
        let sp = SparsityConfig { beta: 1.0, n_groups: 4, ..Default::default() };
        let (w_i, w_o) = weights(d, big_d, 7);
        let mut rng = SeedRng::new(2);
        let mut tape = Tape::<f64>::new();
        let routed =
            RoutedFfn::from_weights(&mut tape, "ffn", w_i.clone(), w_o.clone(), &cfg, &sp, &mut rng).unwrap();
        let x = tape.leaf(Tensor::randn(vec![n, d], 1.0, &mut rng)).unwrap();
        let got = routed.forward(&mut tape, x).unwrap();
        assert_eq!(got.routing.groups_active, 4);
        assert_eq!(got.routing.counts, vec![n; 4]);

        let wi = tape.leaf(w_i).unwrap();
        let wo = tape.leaf(w_o).unwrap();
        let h = tape.matmul(x, wi).unwrap();
        let a = tape.relu(h).unwrap();
        let dense = tape.matmul(a, wo).unwrap();
        for (r, d) in tape.data(got.out).iter().zip(tape.data(dense)) {
            assert!((r - d).abs() < 1e-6, "beta = 1 must reproduce the dense layer: {r} vs {d}");
        }
    }

    #[test]
    fn block_matmul_flops_scale_with_beta_exactly() {
        let (d, big_d, n) = (6, 12, 9);
        let cfg = toy_cfg(d, big_d);
        let sp = SparsityConfig { beta: 0.5, n_groups: 4, gated: true, ..Default::default() };
        let mut rng = SeedRng::new(3);
        let mut tape = Tape::<f64>::new();
        let routed = RoutedFfn::new(&mut tape, "ffn", &cfg, &sp, &mut rng).unwrap();
        let x = tape.leaf(Tensor::randn(vec![n, d], 1.0, &mut rng)).unwrap();
        let (out, c) = tape.counters_scope(|t| routed.forward(t, x).unwrap());

        let active: usize = out.routing.counts.iter().sum();
        assert_eq!(active, n * 2, "each of n tokens activates round(beta*G) = 2 groups");
        let width = big_d / 4;
        let r = cfg.rank;
        let expected: u64 = (n * d * 4                              // router logits
            + active * (d * width + d * r + r * width               // input block + correction
            + width * d + width * r + r * d)) as u64; // output block + correction
        assert_eq!(c.flops, expected, "counted flops must match the activation ledger");
        let block_only = (active * (d * width + width * d)) as u64;
        assert_eq!(block_only, (sp.beta * (2 * n * d * big_d) as f64) as u64, "block matmuls cost beta * 2ndD");
    }

    #[test]
    fn routing_prefers_large_magnitude_and_breaks_ties_low() {
        let cfg = toy_cfg(4, 8);
        let sp = SparsityConfig { beta: 0.5, n_groups: 4, ..Default::default() };
        let mut rng = SeedRng::new(4);
        let mut tape = Tape::<f64>::new();
        let (w_i, w_o) = weights(4, 8, 9);
        let mut routed = RoutedFfn::from_weights(&mut tape, "ffn", w_i, w_o, &cfg, &sp, &mut rng).unwrap();
        // Identity router: logits equal the input row.
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        tape.leaf_data_mut(routed.w_r).copy_from_slice(&eye);
        routed.groups_active = 2;
        let x = tape
            .leaf(Tensor::from_rows(&[vec![3.0, -5.0, 1.0, 0.5], vec![2.0, -2.0, 0.0, 0.0]]))
            .unwrap();
        let got = routed.forward(&mut tape, x).unwrap();
        assert_eq!(got.routing.assignments[0], vec![0, 1], "row 0: |3| second; row 1: tie broken to group 0");
        assert_eq!(got.routing.assignments[1], vec![0, 1], "row 0: |-5| largest; row 1: tie");
        assert!(got.routing.assignments[2].is_empty());
        assert!(got.routing.assignments[3].is_empty());
    }

    #[test]
    fn uniform_routing_balance_is_one_and_collapse_approaches_g() {
        let cfg = toy_cfg(4, 8);
        let sp = SparsityConfig { beta: 0.25, n_groups: 4, ..Default::default() };
        let mut rng = SeedRng::new(5);
        let mut tape = Tape::<f64>::new();
        let routed = RoutedFfn::new(&mut tape, "ffn", &cfg, &sp, &mut rng).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        tape.leaf_data_mut(routed.w_r).copy_from_slice(&eye);

        // One-hot rows cycling through groups: perfectly uniform routing.
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..4).map(|j| if i % 4 == j { 30.0 } else { 0.0 }).collect())
            .collect();
        let x = tape.leaf(Tensor::from_rows(&rows)).unwrap();
        let out = routed.forward(&mut tape, x).unwrap();
        assert_eq!(out.routing.counts, vec![2; 4]);
        assert!((out.routing.count_cv()).abs() < 1e-12);
        let bal = routed.balance_loss(&mut tape, out.router_logits, &out.routing).unwrap();
        assert!((tape.scalar_value(bal) - 1.0).abs() < 1e-12, "uniform routing scores exactly 1");

        // Every row favoring group 0 collapses the histogram.
        let rows: Vec<Vec<f64>> = (0..8).map(|_| vec![30.0, 0.0, 0.0, 0.0]).collect();
        let x = tape.leaf(Tensor::from_rows(&rows)).unwrap();
        let out = routed.forward(&mut tape, x).unwrap();
        assert_eq!(out.routing.counts, vec![8, 0, 0, 0]);
        assert!(out.routing.count_cv() > 1.0);
        let bal = routed.balance_loss(&mut tape, out.router_logits, &out.routing).unwrap();
        assert!((tape.scalar_value(bal) - 4.0).abs() < 1e-6, "collapse approaches G = 4");
    }

    #[test]
    fn gates_multiply_rows_by_their_sigmoid_logit() {
        let (d, big_d, n) = (4, 8, 6);
        let cfg = toy_cfg(d, big_d);
        let mk = |gated: bool| SparsityConfig { beta: 0.25, n_groups: 4, gated, ..Default::default() };
        let (w_i, w_o) = weights(d, big_d, 11);
        let xval = Tensor::randn(vec![n, d], 1.0, &mut SeedRng::new(12));

        let run = |gated: bool| {
            let mut tape = Tape::<f64>::new();
            let mut rng = SeedRng::new(6);
            let routed =
                RoutedFfn::from_weights(&mut tape, "ffn", w_i.clone(), w_o.clone(), &cfg, &mk(gated), &mut rng)
                    .unwrap();
            let x = tape.leaf(xval.clone()).unwrap();
            let out = routed.forward(&mut tape, x).unwrap();
            let logits = tape.data(out.router_logits).to_vec();
            (tape.data(out.out).to_vec(), logits, out.routing)
        };
        let (gated, logits, routing) = run(true);
        let (plain, _, _) = run(false);
        for row in 0..n {
            let grp = (0..4).find(|&g| routing.assignments[g].contains(&row)).unwrap();
            let gate = 1.0 / (1.0 + (-logits[row * 4 + grp]).exp());
            for col in 0..d {
                let (gv, pv) = (gated[row * d + col], plain[row * d + col]);
                assert!((gv - pv * gate).abs() < 1e-9, "row {row}: {gv} vs {pv} * {gate}");
            }
        }
    }

    #[test]
    fn gradients_flow_to_router_and_adapters_but_not_blocks() {
        let cfg = toy_cfg(4, 8);
        let sp = SparsityConfig { beta: 0.5, n_groups: 4, ..Default::default() };
        let mut rng = SeedRng::new(8);
        let mut tape = Tape::<f64>::new();
        let routed = RoutedFfn::new(&mut tape, "ffn", &cfg, &sp, &mut rng).unwrap();
        let x = tape.leaf(Tensor::randn(vec![6, 4], 1.0, &mut rng)).unwrap();
        let out = routed.forward(&mut tape, x).unwrap();
        let main = tape.sum(out.out).unwrap();
        let bal = routed.balance_loss(&mut tape, out.router_logits, &out.routing).unwrap();
        let wbal = tape.scale(bal, 0.01).unwrap();
        let loss = tape.add(main, wbal).unwrap();
        tape.backward(loss).unwrap();

        let gr = tape.grad(routed.w_r).expect("router trains");
        assert!(gr.iter().any(|g| *g != 0.0));
        for id in [routed.adapters.b_i, routed.adapters.c_i, routed.adapters.b_o, routed.adapters.c_o] {
            assert!(tape.grad(id).is_some(), "adapters train");
        }
        for blk in routed.w_i_blocks.iter().chain(&routed.w_o_blocks) {
            assert!(tape.grad(*blk).is_none(), "frozen blocks receive no gradient");
        }
        assert_eq!(routed.trainable_ids().len(), 5);
        assert_eq!(routed.sites().len(), 2);
    }

    #[test]
    fn wrong_width_input_is_rejected() {
        let cfg = toy_cfg(4, 8);
        let sp = SparsityConfig { n_groups: 4, ..Default::default() };
        let mut rng = SeedRng::new(9);
        let mut tape = Tape::<f64>::new();
        let routed = RoutedFfn::new(&mut tape, "ffn", &cfg, &sp, &mut rng).unwrap();
        let x = tape.leaf(Tensor::zeros(vec![3, 7])).unwrap();
        assert!(matches!(routed.forward(&mut tape, x), Err(Error::ShapeMismatch { .. })));
    }
}
