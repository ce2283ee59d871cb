//! Product-quantization codebooks: fit, assign, refine, serialize.
//!
//! A codebook set splits each d-dimensional vector into d/d_sub
//! sub-vectors and snaps each to its nearest codeword. Fitting is
//! k-means++-style seeding followed by periodic Lloyd refits; one refit
//! never raises the batch's quantization error. Codes are the compressed
//! representation that the top-L key selector compares.
//!
//! Run with: cargo run --example pq_quantize

use sparsetune::pq::Codebooks;
use sparsetune::rng::SeedRng;
use sparsetune::tensor::Tensor;

fn main() -> sparsetune::Result<()> {
    let (n, dim, d_sub, n_words) = (256, 16, 4, 8);
    let rng = SeedRng::new(11);

    // Draw rows from a few Gaussian clusters so there is structure to find.
    let mut centers = Vec::new();
    for c in 0..6 {
        let mut cr = rng.split_str(&format!("center{c}"));
        centers.push((0..dim).map(|_| 3.0 * cr.normal_f64()).collect::<Vec<f64>>());
    }
    let mut dr = rng.split_str("data");
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = &centers[dr.below(centers.len())];
        data.extend(c.iter().map(|&m| m + 0.5 * dr.normal_f64()));
    }
    let x = Tensor::new(vec![n, dim], data)?;

    let mut cb = Codebooks::init(&x, d_sub, n_words, &mut rng.split_str("fit"))?;
    println!(
        "{} books x {} words over {}-dim sub-vectors ({} parameters)",
        cb.n_books(),
        cb.n_words(),
        cb.d_sub(),
        cb.param_count()
    );

    let codes = cb.assign_codes(&x)?;
    println!("\nfirst three code rows (one entry per book):");
    for i in 0..3 {
        println!("  row {i}: {:?}", codes.row(i));
    }

    // Lloyd refits only run when the step hits the period; each one must
    // not increase the error on the batch it was fit to.
    let mut err = cb.quantization_error(&x, &codes)?;
    println!("\ninitial quantization error {err:.4}");
    for step in 1..=5u64 {
        let refreshed = cb.update_codebooks(&x, step, 1)?;
        let codes = cb.assign_codes(&x)?;
        let next = cb.quantization_error(&x, &codes)?;
        assert!(refreshed, "period 1 refits on every step");
        assert!(next <= err + 1e-12, "a Lloyd step never raises batch error");
        println!("  after refit {step}: {next:.4}");
        err = next;
    }

    // A codeword is literally a slice of the fitted centroid table.
    let w = cb.word(0, 0);
    println!("\nbook 0, word 0: {:?}", w.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());

    // decode() concatenates the words a code row names - the
    // reconstruction whose distance to the original is the quantization
    // error being minimized.
    let rec = cb.decode(codes.row(0))?;
    let orig = &x.data()[..dim];
    let dist: f64 = rec.iter().zip(orig).map(|(r, o)| (r - o) * (r - o)).sum();
    println!("row 0 reconstruction distance: {dist:.4}");

    // Codebooks serialize to plain bytes (adapter checkpoints carry them).
    let current = cb.assign_codes(&x)?;
    let bytes = cb.to_bytes();
    let back = Codebooks::<f64>::from_bytes(&bytes)?;
    assert_eq!(back.assign_codes(&x)?.codes, current.codes, "roundtrip preserves assignments");
    println!("\nserialized {} bytes; assignments identical after roundtrip", bytes.len());
    Ok(())
}
