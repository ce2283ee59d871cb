//! The sparse attention kernel trio, step by step.
//!
//! Attention over a restricted key set is three kernels chained over one
//! CSR pattern: `sddmm` computes q·k scores only where the pattern has an
//! entry, `sparse_row_softmax` normalizes each row over its stored
//! entries, and `spmm` mixes value rows with those probabilities. This
//! example builds a small causal pattern, runs the trio, checks the
//! result against a dense masked softmax computed by hand, and shows what
//! the cost counters metered along the way.
//!
//! Run with: cargo run --example sparse_attention

use std::rc::Rc;

use sparsetune::rng::SeedRng;
use sparsetune::tensor::{Tape, Tensor};
use sparsetune::CsrPattern;

fn main() -> sparsetune::Result<()> {
    let (n, d) = (6, 4);
    let rng = SeedRng::new(7);
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(Tensor::randn(vec![n, d], 1.0, &mut rng.split_str("q")))?;
    let k = tape.leaf(Tensor::randn(vec![n, d], 1.0, &mut rng.split_str("k")))?;
    let v = tape.leaf(Tensor::randn(vec![n, d], 1.0, &mut rng.split_str("v")))?;

    // Keep at most the two most recent causal positions per query: the
    // kind of pattern the quantized selector produces, written by hand.
    let rows: Vec<Vec<usize>> = (0..n).map(|i| (i.saturating_sub(1)..=i).collect()).collect();
    let pattern = Rc::new(CsrPattern::from_rows(n, &rows)?);
    println!("pattern rows (kept key indices per query):");
    for (i, row) in rows.iter().enumerate() {
        println!("  query {i}: {row:?}");
    }

    let (trio, cost) = tape.counters_scope(|t| {
        let scores = t.sddmm(q, k, Rc::clone(&pattern))?;
        let probs = t.sparse_row_softmax(scores, Rc::clone(&pattern), None)?;
        let out = t.spmm(probs, v, Rc::clone(&pattern))?;
        Ok::<_, sparsetune::Error>((probs, out))
    });
    let (probs, out) = trio?;

    // Dense reference: full scores, mask non-pattern entries out of the
    // softmax, renormalize over survivors, then mix values.
    let qd = tape.data(q).to_vec();
    let kd = tape.data(k).to_vec();
    let vd = tape.data(v).to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let kept = &rows[i];
        let mut weights: Vec<f64> = kept
            .iter()
            .map(|&j| (0..d).map(|c| qd[i * d + c] * kd[j * d + c]).sum::<f64>())
            .collect();
        let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        weights.iter_mut().for_each(|w| *w = (*w - m).exp());
        let z: f64 = weights.iter().sum();
        for c in 0..d {
            let want: f64 =
                kept.iter().zip(&weights).map(|(&j, w)| w / z * vd[j * d + c]).sum();
            worst = worst.max((tape.data(out)[i * d + c] - want).abs());
        }
    }
    println!("\nsparse trio vs dense masked reference: max |difference| = {worst:.2e}");
    assert!(worst < 1e-12, "the trio must match the dense computation exactly");

    let nnz = pattern.nnz() as u64;
    println!("\nmetered inside the scope:");
    println!("  stored entries        {nnz} (vs {} dense)", n * n);
    println!("  flops                 {} (sddmm {} + spmm {})", cost.flops, nnz * d as u64, nnz * d as u64);
    println!("  flops by op           {:?}", cost.flops_by_op);
    println!("  peak live bytes       {}", cost.peak_bytes);
    println!("\nrow 3 probabilities: {:?}", &tape.data(probs)[pattern.row_len(0) + pattern.row_len(1) + pattern.row_len(2)..][..pattern.row_len(3)]);
    Ok(())
}
