//! Group-routed feed-forward: blocked sparse batching and the balance loss.
//!
//! The feed-forward width splits into G column/row blocks. A trainable
//! router picks each token's top-G' groups by logit magnitude; the layer
//! then iterates weight blocks and gathers the tokens that chose each —
//! so arithmetic scales with beta = G'/G instead of the full width.
//! Low-rank corrections stay whole matrices, sliced per block at use, and
//! sigmoid gates modulate each token's block outputs whenever routing is
//! actually sparse. A load-balance penalty (1 when uniform, G when
//! collapsed) keeps groups evenly used.
//!
//! Run with: cargo run --example routed_ffn

use sparsetune::config::{Activation, BlockConfig, SparsityConfig};
use sparsetune::ffn::RoutedFfn;
use sparsetune::rng::SeedRng;
use sparsetune::tensor::{Tape, Tensor};

fn main() -> sparsetune::Result<()> {
    let mut cfg = BlockConfig::new(32, 16, 128, Activation::Relu)?;
    cfg.rank = 4;
    let sp = SparsityConfig { n_groups: 4, beta: 0.5, ..Default::default() };
    let (n, g) = (48, sp.n_groups);

    let rng = SeedRng::new(21);
    let mut tape = Tape::<f64>::new();
    let ffn = RoutedFfn::new(&mut tape, "ffn", &cfg, &sp, &mut rng.split_str("init"))?;
    let x = tape.leaf(Tensor::randn(vec![n, cfg.d_model], 1.0, &mut rng.split_str("x")))?;

    let (out, cost) = tape.counters_scope(|t| ffn.forward(t, x));
    let out = out?;
    println!(
        "routed {} tokens through {}/{} groups each (beta = {})",
        n,
        ffn.groups_active,
        g,
        sp.beta
    );
    println!("activation counts per group: {:?}", out.routing.counts);
    println!("count coefficient of variation: {:.3}", out.routing.count_cv());

    // The matmul work decomposes exactly: router n*d*G, blocked base work
    // beta * (2 n d D), and low-rank corrections 2 r (d + D/G) per routed
    // token. The base term is half the dense layer's cost at beta = 1/2.
    let (d, big_d, r) = (cfg.d_model as u64, cfg.d_ffn as u64, cfg.rank as u64);
    let (n64, g64) = (n as u64, g as u64);
    let routed_tokens = n64 * ffn.groups_active as u64;
    let dense_base = 2 * n64 * d * big_d;
    let base = (sp.beta * dense_base as f64) as u64;
    let router = n64 * d * g64;
    let adapters = routed_tokens * 2 * r * (d + big_d / g64);
    let matmul = cost.flops_by_op["matmul"];
    println!("\nmatmul flops {matmul} = router {router} + blocked base {base} + adapters {adapters}");
    println!("blocked base / dense base = {:.3} (beta = {})", base as f64 / dense_base as f64, sp.beta);
    assert_eq!(matmul, router + base + adapters, "flop decomposition is exact");

    // The balance loss reads the same routing the forward used. Uniform
    // assignment scores 1; a collapsed router approaches G.
    let bal = ffn.balance_loss(&mut tape, out.router_logits, &out.routing)?;
    println!("\nbalance loss on this batch: {:.4} (uniform -> 1, collapse -> {g})", tape.scalar_value(bal));

    // The other end of the scale: a router that always saturates on group
    // 0 sends every token there and the penalty approaches G.
    let mut one_hot = vec![-9.0; n * g];
    (0..n).for_each(|row| one_hot[row * g] = 9.0);
    let hot_logits = tape.leaf(Tensor::new(vec![n, g], one_hot)?)?;
    let mut collapsed = out.routing.clone();
    collapsed.groups_active = 1;
    collapsed.assignments = vec![(0..n).collect(), vec![], vec![], vec![]];
    collapsed.counts = vec![n, 0, 0, 0];
    let worst = ffn.balance_loss(&mut tape, hot_logits, &collapsed)?;
    println!("collapsed router, one group only: {:.4}", tape.scalar_value(worst));

    // Everything the optimizer may touch; the block weights stay frozen.
    println!("\ntrainable ids: router + 4 adapter factors = {}", ffn.trainable_ids().len());
    println!("output shape {:?}", tape.shape(out.out));
    Ok(())
}
