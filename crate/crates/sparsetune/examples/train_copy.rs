//! Warm-start sparse tuning on the shifted-copy task, end to end.
//!
//! Phase one trains a dense two-block model with every weight free until
//! it solves the task. Phase two carries those weights into a sparse
//! session — bases frozen, fresh low-rank adapters, attention restricted
//! to quantization-selected keys, feed-forward routed through half its
//! groups — and tunes only the adapters. The first sparse step shows the
//! adaptation shock; the tail shows the sparse model matching the dense
//! cross-entropy while training a small fraction of the values. The
//! balance penalty keeps the router's group usage even, which the closing
//! comparison shows by rerunning with the penalty disabled.
//!
//! Run with: cargo run --release --example train_copy

use sparsetune::{TrainSession, TrainSpec, TuningMode};

/// Total values in leaves the optimizer may move.
fn trainable_values(s: &TrainSession) -> usize {
    s.tape.trainable_leaves().iter().map(|&id| s.tape.data(id).len()).sum()
}

fn main() -> sparsetune::Result<()> {
    let dense_spec = TrainSpec {
        mode: TuningMode::Full,
        steps: 300,
        lr: 2e-3,
        seed: 2,
        log_every: Some(50),
        ..TrainSpec::default()
    };
    println!(
        "shifted-copy task: predict the previous token; vocab {}, seq {}, {} blocks, d_model {}, {} heads",
        dense_spec.vocab,
        dense_spec.seq_length,
        dense_spec.n_blocks,
        dense_spec.cfg.d_model,
        dense_spec.cfg.n_heads,
    );

    let mut dense = TrainSession::new(dense_spec.clone())?;
    println!("\n== phase 1: full tuning, {} trainable values ==", trainable_values(&dense));
    let warm = dense.run(dense_spec.steps)?;
    let dense_tail = warm.tail_mean_task_loss(50);
    println!(
        "dense: initial {:.4} -> final {:.4} (tail-50 cross-entropy {:.4})",
        warm.initial_loss(),
        warm.final_loss(),
        dense_tail,
    );
    assert!(
        warm.final_loss() < 0.5 * warm.initial_loss(),
        "full tuning should at least halve the initial loss"
    );

    let sparse_spec = TrainSpec { mode: TuningMode::Sparse, ..dense_spec.clone() };
    let mut sparse = dense.adapt(sparse_spec.clone())?;
    println!(
        "\n== phase 2: sparse tuning, {} trainable values, lambda {} beta {} ==",
        trainable_values(&sparse),
        sparse_spec.sparsity.lambda,
        sparse_spec.sparsity.beta,
    );
    let tuned = sparse.run(sparse_spec.steps)?;
    let sparse_tail = tuned.tail_mean_task_loss(50);
    println!(
        "sparse: adaptation shock {:.4} -> final {:.4} (tail-50 cross-entropy {:.4})",
        tuned.initial_loss(),
        tuned.final_loss(),
        sparse_tail,
    );
    println!(
        "tail cross-entropy ratio sparse/dense: {:.3} (the objectives differ by the balance term, so compare cross-entropy)",
        sparse_tail / dense_tail,
    );

    let last = tuned.records.last().expect("ran at least one step");
    if let (Some(cv), Some(counts)) = (tuned.tail_mean_cv(50), last.activation_counts.as_ref()) {
        println!("routing: tail-50 activation CV {cv:.3}, last-step counts {counts:?}");
    }

    // Same run with the balance penalty off: cross-entropy stays fine on
    // this easy task, but group usage drifts visibly apart.
    let mut unbalanced_spec = sparse_spec.clone();
    unbalanced_spec.sparsity.balance_weight = 0.0;
    unbalanced_spec.log_every = None;
    let mut unbalanced = dense.adapt(unbalanced_spec.clone())?;
    let free = unbalanced.run(unbalanced_spec.steps)?;
    let cv_on = tuned.tail_mean_cv(50).expect("routed run reports CV");
    let cv_off = free.tail_mean_cv(50).expect("routed run reports CV");
    println!("\nbalance penalty on vs off: activation CV {cv_on:.3} vs {cv_off:.3}");
    assert!(cv_on < cv_off, "the balance penalty should even out group usage");
    Ok(())
}
