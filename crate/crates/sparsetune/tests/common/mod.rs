//! Shared helpers for the integration suites: an independent dense
//! attention oracle (plain `Vec` arithmetic, no tape) and a central
//! finite-difference gradient checker.

#![allow(dead_code)]

use sparsetune::{SeedRng, Tape, Tensor, TensorId};

/// Relative tolerance for autodiff-vs-finite-difference agreement (f64).
pub const GRAD_RTOL: f64 = 1e-6;
/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Dense attention with an explicit keep mask, written independently of the
/// library kernels: masked scores drop out of the softmax entirely, and the
/// surviving weights renormalize among themselves.
pub fn dense_masked_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_k: usize,
    d: usize,
    d_v: usize,
    keep: &[Vec<bool>],
) -> Vec<f64> {
    assert_eq!(keep.len(), n_q);
    let mut out = vec![0.0; n_q * d_v];
    for i in 0..n_q {
        let mut scores = Vec::new();
        for j in 0..n_k {
            if keep[i][j] {
                let s: f64 = (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum();
                scores.push((j, s));
            }
        }
        assert!(!scores.is_empty(), "oracle rows must keep at least one key");
        let m = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|&(_, s)| (s - m).exp()).sum();
        for &(j, s) in &scores {
            let p = (s - m).exp() / z;
            for t in 0..d_v {
                out[i * d_v + t] += p * v[j * d_v + t];
            }
        }
    }
    out
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over `probes_per_input` random coordinates of each input.
/// The graph is rebuilt from scratch for every probe, so `build` must be
/// deterministic given the leaf values.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], probes_per_input: usize, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    let mut tape = Tape::<f64>::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().requires_grad(true)).expect("leaf"))
        .collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.shape(loss), &[1usize][..], "gradcheck needs a scalar loss");
    tape.backward(loss).expect("backward");
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
        .collect();

    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let ids: Vec<TensorId> = tensors.iter().map(|x| t.leaf(x.clone()).expect("leaf")).collect();
        let l = build(&mut t, &ids);
        t.scalar_value(l)
    };

    let mut rng = SeedRng::new(seed);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        for _ in 0..probes_per_input {
            let j = rng.below(n);
            let nudge = |delta: f64| {
                let mut set: Vec<Tensor<f64>> = inputs.to_vec();
                let mut data: Vec<f64> = x.data().to_vec();
                data[j] += delta;
                set[i] = Tensor::new(x.shape().to_vec(), data).expect("same shape");
                set
            };
            let fd = (eval(&nudge(FD_EPS)) - eval(&nudge(-FD_EPS))) / (2.0 * FD_EPS);
            let ad = grads[i][j];
            let rel = (ad - fd).abs() / 1.0f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

/// Deterministic Gaussian tensor helper.
pub fn randn(shape: Vec<usize>, std: f64, seed: u64, label: &str) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut SeedRng::new(seed).split_str(label))
}
