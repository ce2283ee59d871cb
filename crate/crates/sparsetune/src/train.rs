//! Desk-scale training loop on a toy sequence task.
//!
//! The task is shifted copy: predict the previous token at every position
//! (position 0 predicts itself), which causal attention solves by looking
//! one step back. A small decoder — embedding, sinusoidal positions, a
//! stack of blocks, final norm, output head — trains under any tuning
//! mode; embedding and head always train since they belong to the task,
//! not the base model. One tape lives across steps: parameters are
//! persistent leaves, each step's activations are dropped afterwards.

use crate::block::{Block, BlockSnapshot};
use crate::config::{Activation, BlockConfig, SparsityConfig, TuningMode};
use crate::error::{Error, Result};
use crate::lora::AdapterSite;
use crate::rng::SeedRng;
use crate::tensor::{Element, Tape, Tensor, TensorId};

/// Everything a training run depends on.
#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub mode: TuningMode,
    pub steps: u64,
    pub batch_size: usize,
    pub seq_length: usize,
    pub lr: f64,
    /// When set, cosine-decay the learning rate from `lr` down to this
    /// value over `steps` optimization steps; `None` keeps `lr` constant.
    pub lr_min: Option<f64>,
    pub seed: u64,
    pub vocab: usize,
    pub n_blocks: usize,
    pub cfg: BlockConfig,
    pub sparsity: SparsityConfig,
    /// Number of distinct batches cycled through; 1 trains on a single
    /// fixed batch (with lr = 0 the loss is then exactly constant).
    pub distinct_batches: usize,
    /// Print a progress line every this many steps.
    pub log_every: Option<u64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        // Four heads give the selector redundancy (a key missed by one
        // head's top-L is usually caught by another); two-dimensional
        // sub-vectors give the indicator score a fine 0..=8 range.
        let mut cfg = BlockConfig::new(64, 16, 128, Activation::Relu).expect("toy geometry is valid");
        cfg.rank = 8;
        Self {
            mode: TuningMode::Full,
            steps: 500,
            batch_size: 8,
            seq_length: 64,
            lr: 1e-3,
            lr_min: None,
            seed: 0,
            vocab: 64,
            n_blocks: 2,
            cfg,
            sparsity: SparsityConfig { n_groups: 4, n_words: 4, d_sub: 2, refresh_period: 5, ..Default::default() },
            distinct_batches: 512,
            log_every: None,
        }
    }
}

/// Per-step telemetry.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    /// Optimized objective: cross-entropy plus the weighted balance term.
    pub loss: f64,
    /// Cross-entropy alone — the number to compare across tuning modes,
    /// since only routed runs carry a balance term.
    pub task_loss: f64,
    /// Balance penalty value (before weighting), when routed.
    pub balance: Option<f64>,
    /// Coefficient of variation of the step's activation histogram.
    pub routing_cv: Option<f64>,
    /// Tokens routed to each group, summed over blocks and sequences.
    pub activation_counts: Option<Vec<usize>>,
    pub quantization_error: Option<f64>,
    pub codebooks_refreshed: bool,
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Mean loss over the last `k` steps — steadier than a single step.
    pub fn tail_mean_loss(&self, k: usize) -> f64 {
        let n = self.records.len();
        let tail = &self.records[n.saturating_sub(k.max(1))..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }

    /// Mean cross-entropy over the last `k` steps, excluding the balance
    /// term — comparable across tuning modes.
    pub fn tail_mean_task_loss(&self, k: usize) -> f64 {
        let n = self.records.len();
        let tail = &self.records[n.saturating_sub(k.max(1))..];
        tail.iter().map(|r| r.task_loss).sum::<f64>() / tail.len() as f64
    }

    /// Mean routing CV over the last `k` steps, when routed.
    pub fn tail_mean_cv(&self, k: usize) -> Option<f64> {
        let n = self.records.len();
        let tail = &self.records[n.saturating_sub(k.max(1))..];
        let cvs: Vec<f64> = tail.iter().filter_map(|r| r.routing_cv).collect();
        (!cvs.is_empty()).then(|| cvs.iter().sum::<f64>() / cvs.len() as f64)
    }
}

/// Sinusoidal absolute positions: even columns sine, odd columns cosine,
/// wavelengths geometric in 10000^(2i/d).
pub fn sinusoidal_positions<T: Element>(n: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let rate = (p as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = T::of(rate.sin());
            data[p * d + 2 * i + 1] = T::of(rate.cos());
        }
    }
    Tensor::new(vec![n, d], data).expect("position table dims are consistent")
}

/// One batch of the shifted-copy task: `target[i] = input[max(i-1, 0)]`.
pub fn shifted_copy_batch(
    seed: u64,
    batch_index: u64,
    batch_size: usize,
    seq_length: usize,
    vocab: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = SeedRng::new(seed).split_str("data").split(batch_index);
    (0..batch_size)
        .map(|_| {
            let input: Vec<usize> = (0..seq_length).map(|_| rng.below(vocab)).collect();
            let mut target = Vec::with_capacity(seq_length);
            target.push(input[0]);
            target.extend_from_slice(&input[..seq_length - 1]);
            (input, target)
        })
        .collect()
}

/// Tiny decoder for the toy task.
pub struct ToyModel<T: Element> {
    pub vocab: usize,
    pub cfg: BlockConfig,
    pub embed: TensorId,
    pub pos: TensorId,
    pub blocks: Vec<Block<T>>,
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
    pub head: TensorId,
    balance_weight: f64,
}

/// Trained weights of a toy model with any adapters merged in: the
/// exchange format for switching tuning modes mid-experiment.
#[derive(Clone, Debug)]
pub struct ToySnapshot<T: Element> {
    pub embed: Tensor<T>,
    pub blocks: Vec<BlockSnapshot<T>>,
    pub ln_gamma: Vec<T>,
    pub ln_beta: Vec<T>,
    pub head: Tensor<T>,
}

/// Aggregated telemetry from one batch forward.
pub struct BatchStats {
    /// Cross-entropy alone, before the weighted balance term is added.
    pub task_loss: f64,
    pub balance: Option<f64>,
    pub activation_counts: Option<Vec<usize>>,
    pub quantization_error: Option<f64>,
    pub refreshed: bool,
}

impl<T: Element> ToyModel<T> {
    pub fn new(tape: &mut Tape<T>, spec: &TrainSpec, rng: &mut SeedRng) -> Result<Self> {
        spec.cfg.validate()?;
        spec.sparsity.validate(&spec.cfg)?;
        if spec.vocab < 2 {
            return Err(Error::Config(format!("vocabulary needs >= 2 symbols, got {}", spec.vocab)));
        }
        if spec.seq_length == 0 || spec.batch_size == 0 || spec.n_blocks == 0 {
            return Err(Error::Config("sequence length, batch size and depth must be >= 1".into()));
        }
        if spec.distinct_batches == 0 {
            return Err(Error::Config("distinct_batches must be >= 1".into()));
        }
        let d = spec.cfg.d_model;
        let embed = tape.leaf(
            Tensor::randn(vec![spec.vocab, d], 0.5, &mut rng.split_str("embed")).requires_grad(true),
        )?;
        let pos = tape.leaf(sinusoidal_positions(spec.seq_length, d))?;
        let mut blocks = Vec::with_capacity(spec.n_blocks);
        for i in 0..spec.n_blocks {
            blocks.push(Block::new(tape, &format!("block{i}"), &spec.cfg, &spec.sparsity, spec.mode, rng)?);
        }
        let ln_gamma = tape.leaf(Tensor::new(vec![d], vec![T::one(); d])?.requires_grad(true))?;
        let ln_beta = tape.leaf(Tensor::<T>::zeros(vec![d]).requires_grad(true))?;
        let head = tape.leaf(
            Tensor::randn(vec![d, spec.vocab], 0.02, &mut rng.split_str("head")).requires_grad(true),
        )?;
        Ok(Self {
            vocab: spec.vocab,
            cfg: spec.cfg.clone(),
            embed,
            pos,
            blocks,
            ln_gamma,
            ln_beta,
            head,
            balance_weight: spec.sparsity.balance_weight,
        })
    }

    /// Mean task loss over a batch, plus the weighted balance penalty when
    /// the blocks are routed. `step` drives codebook refreshes.
    pub fn loss_batch(
        &mut self,
        tape: &mut Tape<T>,
        batch: &[(Vec<usize>, Vec<usize>)],
        step: Option<u64>,
    ) -> Result<(TensorId, BatchStats)> {
        assert!(!batch.is_empty(), "empty batch");
        let b = batch.len();
        let mut ce_acc: Option<TensorId> = None;
        let mut bal_acc: Option<TensorId> = None;
        let mut counts: Option<Vec<usize>> = None;
        let mut quant_sum = 0.0;
        let mut quant_n = 0usize;
        let mut refreshed = false;

        for (input, target) in batch {
            let n = input.len();
            let mut x = tape.embed(self.embed, input.clone())?;
            let p = tape.gather_rows(self.pos, (0..n).collect())?;
            x = tape.add(x, p)?;
            for block in &mut self.blocks {
                let out = block.forward(tape, x, true, step)?;
                x = out.out;
                if let Some(err) = out.attention.quantization_error {
                    quant_sum += err;
                    quant_n += 1;
                }
                refreshed |= out.attention.refreshed;
                if let Some((_, routing)) = &out.routing {
                    let agg = counts.get_or_insert_with(|| vec![0; routing.counts.len()]);
                    for (a, c) in agg.iter_mut().zip(&routing.counts) {
                        *a += c;
                    }
                }
                if let Some(bal) = block.balance_loss(tape, &out)? {
                    bal_acc = Some(match bal_acc {
                        None => bal,
                        Some(acc) => tape.add(acc, bal)?,
                    });
                }
            }
            let normed = tape.layer_norm(x, self.ln_gamma, self.ln_beta, self.cfg.ln_eps)?;
            let logits = tape.matmul(normed, self.head)?;
            let ce = tape.cross_entropy(logits, target.clone())?;
            ce_acc = Some(match ce_acc {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }

        let mut loss = tape.scale(ce_acc.expect("batch is non-empty"), T::of(1.0 / b as f64))?;
        let task_loss = tape.scalar_value(loss).as_f64();
        let mut balance_value = None;
        if let Some(bal) = bal_acc {
            let mean_bal = tape.scale(bal, T::of(1.0 / b as f64))?;
            balance_value = Some(tape.scalar_value(mean_bal).as_f64());
            if self.balance_weight > 0.0 {
                let weighted = tape.scale(mean_bal, T::of(self.balance_weight))?;
                loss = tape.add(loss, weighted)?;
            }
        }
        let stats = BatchStats {
            task_loss,
            balance: balance_value,
            activation_counts: counts,
            quantization_error: (quant_n > 0).then(|| quant_sum / quant_n as f64),
            refreshed,
        };
        Ok((loss, stats))
    }

    /// Adapter sites across all blocks, for checkpointing.
    pub fn sites(&self) -> Vec<AdapterSite> {
        self.blocks.iter().flat_map(|b| b.sites()).collect()
    }

    /// Capture every weight with adapters merged in.
    pub fn snapshot(&self, tape: &Tape<T>) -> ToySnapshot<T> {
        let d = self.cfg.d_model;
        let grab = |id: TensorId, cols: usize| {
            Tensor::new(vec![tape.value(id).numel() / cols, cols], tape.data(id).to_vec()).expect("leaf shape")
        };
        ToySnapshot {
            embed: grab(self.embed, d),
            blocks: self.blocks.iter().map(|b| b.snapshot(tape)).collect(),
            ln_gamma: tape.data(self.ln_gamma).to_vec(),
            ln_beta: tape.data(self.ln_beta).to_vec(),
            head: grab(self.head, self.vocab),
        }
    }

    /// Rebuild the model from a snapshot under a (possibly different)
    /// tuning mode. This is the adaptation step: a densely trained model
    /// re-enters training with frozen bases, fresh adapters, and — in
    /// sparse mode — quantized attention and a routed feed-forward.
    pub fn from_snapshot(
        tape: &mut Tape<T>,
        spec: &TrainSpec,
        snap: ToySnapshot<T>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let d = spec.cfg.d_model;
        if snap.blocks.len() != spec.n_blocks {
            return Err(Error::Config(format!(
                "snapshot has {} blocks, spec wants {}",
                snap.blocks.len(),
                spec.n_blocks
            )));
        }
        if snap.embed.shape() != [spec.vocab, d] || snap.head.shape() != [d, spec.vocab] {
            return Err(Error::Config("snapshot embedding/head do not match the spec geometry".into()));
        }
        let embed = tape.leaf(snap.embed.requires_grad(true))?;
        let pos = tape.leaf(sinusoidal_positions(spec.seq_length, d))?;
        let mut blocks = Vec::with_capacity(spec.n_blocks);
        for (i, b) in snap.blocks.into_iter().enumerate() {
            blocks.push(Block::from_snapshot(
                tape,
                &format!("block{i}"),
                b,
                &spec.cfg,
                &spec.sparsity,
                spec.mode,
                rng,
            )?);
        }
        let ln_gamma = tape.leaf(Tensor::new(vec![d], snap.ln_gamma)?.requires_grad(true))?;
        let ln_beta = tape.leaf(Tensor::new(vec![d], snap.ln_beta)?.requires_grad(true))?;
        let head = tape.leaf(snap.head.requires_grad(true))?;
        Ok(Self {
            vocab: spec.vocab,
            cfg: spec.cfg.clone(),
            embed,
            pos,
            blocks,
            ln_gamma,
            ln_beta,
            head,
            balance_weight: spec.sparsity.balance_weight,
        })
    }
}

/// Plain Adam over the tape's trainable leaves. Moment state is kept in
/// f64 regardless of the tape element type.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    params: Vec<TensorId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Element>(tape: &Tape<T>, params: Vec<TensorId>, lr: f64) -> Self {
        let m = params.iter().map(|&p| vec![0.0; tape.value(p).numel()]).collect();
        let v = params.iter().map(|&p| vec![0.0; tape.value(p).numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, params, m, v }
    }

    /// Apply one update from the gradients currently on the tape.
    pub fn step<T: Element>(&mut self, tape: &mut Tape<T>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, &id) in self.params.iter().enumerate() {
            let Some(grad) = tape.grad(id) else { continue };
            let grad: Vec<f64> = grad.iter().map(|g| g.as_f64()).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = tape.leaf_data_mut(id);
            for j in 0..grad.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                data[j] = T::of(data[j].as_f64() - update);
            }
        }
    }
}

/// A live training run: one tape, one model, one optimizer.
pub struct TrainSession {
    pub spec: TrainSpec,
    pub tape: Tape<f64>,
    pub model: ToyModel<f64>,
    pub adam: Adam,
    mark: usize,
    next_step: u64,
}

impl TrainSession {
    pub fn new(spec: TrainSpec) -> Result<Self> {
        let mut tape = Tape::<f64>::new();
        let rng = SeedRng::new(spec.seed);
        let model = ToyModel::new(&mut tape, &spec, &mut rng.split_str("model"))?;
        Self::finish(spec, tape, model)
    }

    /// Carry this session's trained weights into a new session under
    /// `spec` — typically from full tuning into sparse tuning. The task
    /// geometry must match; the tuning mode and sparsity may differ.
    pub fn adapt(&self, spec: TrainSpec) -> Result<Self> {
        let old = &self.spec;
        if (spec.vocab, spec.seq_length, spec.n_blocks) != (old.vocab, old.seq_length, old.n_blocks)
            || spec.cfg.d_model != old.cfg.d_model
            || spec.cfg.n_heads != old.cfg.n_heads
            || spec.cfg.d_ffn != old.cfg.d_ffn
        {
            return Err(Error::Config("adaptation requires matching task and model geometry".into()));
        }
        let snap = self.model.snapshot(&self.tape);
        let mut tape = Tape::<f64>::new();
        let rng = SeedRng::new(spec.seed);
        let model = ToyModel::from_snapshot(&mut tape, &spec, snap, &mut rng.split_str("adapt"))?;
        Self::finish(spec, tape, model)
    }

    fn finish(spec: TrainSpec, tape: Tape<f64>, model: ToyModel<f64>) -> Result<Self> {
        let params = tape.trainable_leaves();
        let adam = Adam::new(&tape, params, spec.lr);
        let mark = tape.mark();
        Ok(Self { spec, tape, model, adam, mark, next_step: 0 })
    }

    /// Run `steps` optimization steps, honoring the spec's progress cadence.
    pub fn run(&mut self, steps: u64) -> Result<TrainOutcome> {
        let mut records = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let record = self.step()?;
            if let Some(every) = self.spec.log_every {
                if every > 0 && record.step % every == 0 {
                    let mut line = format!("step {:>5}  loss {:.4}", record.step, record.loss);
                    if let Some(cv) = record.routing_cv {
                        line.push_str(&format!("  routing-cv {cv:.3}"));
                    }
                    if let Some(q) = record.quantization_error {
                        line.push_str(&format!("  quant-err {q:.4}"));
                    }
                    if let Some(counts) = &record.activation_counts {
                        line.push_str(&format!("  groups {counts:?}"));
                    }
                    println!("{line}");
                }
            }
            records.push(record);
        }
        Ok(TrainOutcome { records })
    }

    /// Learning rate for a given step: constant, or a cosine ramp from
    /// `lr` down to `lr_min` over the planned `steps`.
    fn scheduled_lr(&self, step: u64) -> f64 {
        match self.spec.lr_min {
            None => self.spec.lr,
            Some(floor) => {
                let t = (step as f64 / self.spec.steps.max(1) as f64).min(1.0);
                floor + 0.5 * (self.spec.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Run one optimization step and return its telemetry.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.next_step;
        let batch = shifted_copy_batch(
            self.spec.seed,
            step % self.spec.distinct_batches as u64,
            self.spec.batch_size,
            self.spec.seq_length,
            self.spec.vocab,
        );
        let (loss_id, stats) = self.model.loss_batch(&mut self.tape, &batch, Some(step))?;
        let loss = self.tape.scalar_value(loss_id);
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        self.tape.backward(loss_id)?;
        self.adam.lr = self.scheduled_lr(step);
        self.adam.step(&mut self.tape);
        self.tape.reset_to(self.mark);
        self.next_step += 1;
        let routing_cv = stats.activation_counts.as_ref().map(|counts| {
            let g = counts.len() as f64;
            let mean = counts.iter().sum::<usize>() as f64 / g;
            let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / g;
            if mean == 0.0 {
                0.0
            } else {
                var.sqrt() / mean
            }
        });
        Ok(StepRecord {
            step,
            loss,
            task_loss: stats.task_loss,
            balance: stats.balance,
            routing_cv,
            activation_counts: stats.activation_counts,
            quantization_error: stats.quantization_error,
            codebooks_refreshed: stats.refreshed,
        })
    }
}

/// Run a full training loop per the spec.
pub fn run_train(spec: &TrainSpec) -> Result<TrainOutcome> {
    let steps = spec.steps;
    TrainSession::new(spec.clone())?.run(steps)
}
