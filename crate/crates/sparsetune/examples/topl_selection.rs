//! Indicator scores and bucket-sorted top-L key selection.
//!
//! Queries and keys share one codebook set, so two vectors landing on the
//! same codeword in many books are close — an integer similarity in
//! 0..=M that replaces the dense q·k scan. Selection bucket-sorts those
//! scores and keeps L keys per query; ties resolve toward the most recent
//! key, which suits causal attention. Keys placed exactly on codeword
//! concatenations are recovered perfectly.
//!
//! Run with: cargo run --example topl_selection

use sparsetune::pq::Codebooks;
use sparsetune::rng::SeedRng;
use sparsetune::tensor::Tensor;
use sparsetune::topl::{indicator_score, select_topl};

fn main() -> sparsetune::Result<()> {
    // Two books over 2-dim sub-vectors, four words each: vectors live in
    // 4 dimensions and quantize to a pair of word indices.
    let words = vec![
        vec![3.0, 0.0, 0.0, 3.0, -3.0, 0.0, 0.0, -3.0], // book 0: +x, +y, -x, -y
        vec![3.0, 0.0, 0.0, 3.0, -3.0, 0.0, 0.0, -3.0], // book 1: same layout
    ];
    let cb = Codebooks::from_words(4, 4, words)?;

    // Sixteen keys, one per codeword pair (w0, w1).
    let axes = [[3.0, 0.0], [0.0, 3.0], [-3.0, 0.0], [0.0, -3.0]];
    let mut key_data = Vec::new();
    for w0 in 0..4 {
        for w1 in 0..4 {
            key_data.extend_from_slice(&axes[w0]);
            key_data.extend_from_slice(&axes[w1]);
        }
    }
    let keys = Tensor::new(vec![16, 4], key_data)?;
    let ck = cb.assign_codes(&keys)?;

    // A query near codeword pair (1, 2) must pick exactly the key at that
    // pair: indicator 2 beats the partial matches' 1.
    let query = Tensor::new(vec![1, 4], vec![0.2, 2.8, -3.1, 0.1])?;
    let cq = cb.assign_codes(&query)?;
    println!("query codes {:?}", cq.row(0));
    let scores: Vec<usize> = (0..16).map(|j| indicator_score(cq.row(0), ck.row(j))).collect();
    println!("indicator scores per key: {scores:?}");

    let sel = select_topl(&cq, &ck, 3, false)?;
    println!("top-3 keys for the query: {:?} (key 6 = pair (1,2) first)", sel.rows[0]);
    assert_eq!(sel.rows[0][0], 1 * 4 + 2, "the exact-pair key wins");

    // Ties resolve newest-first. An origin query codes as (0, 0); the
    // exact key 0 wins, and the six keys tied at score 1 (keys 1, 2, 3
    // and 4, 8, 12) are taken from the highest index down.
    let flat = Tensor::new(vec![1, 4], vec![0.0; 4])?;
    let cflat = cb.assign_codes(&flat)?;
    let tied = select_topl(&cflat, &ck, 4, false)?;
    println!("\norigin query selects {:?}: exact key first, then ties newest-first", tied.rows[0]);
    assert_eq!(tied.rows[0], vec![0, 12, 8, 4], "recency order among equal scores");

    // Causal selection at L = lambda*n: the stored-entry count a sparse
    // attention layer reports,小 rows capped at their own length.
    let rng = SeedRng::new(3);
    let many = Tensor::randn(vec![64, 4], 2.0, &mut rng.split_str("keys"));
    let cm = cb.assign_codes(&many)?;
    let l = 8; // lambda = 1/8 at n = 64
    let causal = select_topl(&cm, &cm, l, true)?;
    let dense_entries = 64 * 65 / 2;
    println!(
        "\ncausal top-{l} over 64 keys: {} stored entries (dense causal {}), {} candidates scanned",
        causal.stored_entries(),
        dense_entries,
        causal.candidates_scanned
    );

    // The pattern the attention kernels consume is plain CSR.
    let pat = causal.build_csr();
    println!("CSR row 9 -> keys {:?}", pat.row(9));
    Ok(())
}
