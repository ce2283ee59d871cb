//! Product quantizer for query/key vectors.
//!
//! A d-dimensional vector is split into contiguous sub-spaces of width
//! `d_sub` (the last book takes the remainder when d is not divisible), and
//! each sub-vector is mapped to the index of its nearest codeword under
//! Euclidean distance. Codebooks train with periodic hard cluster-update
//! steps: assign, recompute means, re-seed empty words.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tensor};

/// Per-row codeword indices: `codes[i * n_books + m]` is row i's word in
/// book m. Every index is strictly below the book's word count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeAssignment {
    pub n: usize,
    pub n_books: usize,
    pub codes: Vec<u16>,
}

impl CodeAssignment {
    pub fn row(&self, i: usize) -> &[u16] {
        &self.codes[i * self.n_books..(i + 1) * self.n_books]
    }
}

/// A set of codebooks covering one vector dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebooks<T> {
    dim: usize,
    n_books: usize,
    n_words: usize,
    d_sub: usize,
    /// One flat `[n_words * width(m)]` buffer per book.
    words: Vec<Vec<T>>,
}

impl<T: Element> Codebooks<T> {
    /// Sub-space covered by book `m` as a half-open column range.
    fn span(dim: usize, d_sub: usize, m: usize) -> (usize, usize) {
        (m * d_sub, ((m + 1) * d_sub).min(dim))
    }

    pub fn n_books(&self) -> usize {
        self.n_books
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn d_sub(&self) -> usize {
        self.d_sub
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn book_width(&self, m: usize) -> usize {
        let (lo, hi) = Self::span(self.dim, self.d_sub, m);
        hi - lo
    }

    pub fn word(&self, m: usize, e: usize) -> &[T] {
        let w = self.book_width(m);
        &self.words[m][e * w..(e + 1) * w]
    }

    /// Number of stored scalar parameters across all books.
    pub fn param_count(&self) -> usize {
        self.words.iter().map(Vec::len).sum()
    }

    /// Build from explicit word tables; `words[m]` holds `n_words` rows of
    /// book m's width, concatenated.
    pub fn from_words(dim: usize, n_words: usize, words: Vec<Vec<T>>) -> Result<Self> {
        let n_books = words.len();
        if n_books == 0 || n_words == 0 || dim == 0 {
            return Err(Error::Config("codebooks need at least one book, word, and dimension".into()));
        }
        if n_words > usize::from(u16::MAX) {
            return Err(Error::Config(format!("word count {n_words} exceeds code range")));
        }
        let d_sub = dim.div_ceil(n_books);
        if (n_books - 1) * d_sub >= dim {
            return Err(Error::Config(format!("{n_books} books cannot tile {dim} dimensions",)));
        }
        for (m, book) in words.iter().enumerate() {
            let (lo, hi) = Self::span(dim, d_sub, m);
            if book.len() != n_words * (hi - lo) {
                return Err(Error::Config(format!(
                    "book {m} has {} values, expected {} words x width {}",
                    book.len(),
                    n_words,
                    hi - lo
                )));
            }
        }
        Ok(Self { dim, n_books, n_words, d_sub, words })
    }

    /// Initialize with distance-weighted sampling of distinct input
    /// sub-vectors (k-means++ style), one draw chain per book.
    pub fn init(x: &Tensor<T>, d_sub: usize, n_words: usize, rng: &mut SeedRng) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::Config(format!("codebook init expects a matrix, got {:?}", x.shape())));
        }
        let (n, dim) = (x.shape()[0], x.shape()[1]);
        if n == 0 || d_sub == 0 || d_sub > dim {
            return Err(Error::Config(format!(
                "cannot initialize codebooks: {n} rows, width {d_sub}, dimension {dim}"
            )));
        }
        if n_words == 0 || n_words > usize::from(u16::MAX) {
            return Err(Error::Config(format!("word count {n_words} out of range")));
        }
        let n_books = dim.div_ceil(d_sub);
        let mut words = Vec::with_capacity(n_books);
        for m in 0..n_books {
            let (lo, hi) = Self::span(dim, d_sub, m);
            let w = hi - lo;
            let sub = |i: usize| &x.data()[i * dim + lo..i * dim + hi];

            let mut book: Vec<T> = Vec::with_capacity(n_words * w);
            let mut chosen = 0usize;
            // Squared distance from each row's sub-vector to its nearest
            // already-chosen word; doubles as the sampling weight.
            let mut d2 = vec![f64::INFINITY; n];

            let first = rng.below(n);
            book.extend_from_slice(sub(first));
            chosen += 1;
            while chosen < n_words {
                for i in 0..n {
                    let last = &book[(chosen - 1) * w..chosen * w];
                    let mut acc = 0.0f64;
                    for (a, b) in sub(i).iter().zip(last) {
                        let diff = a.as_f64() - b.as_f64();
                        acc += diff * diff;
                    }
                    if acc < d2[i] {
                        d2[i] = acc;
                    }
                }
                let total: f64 = d2.iter().sum();
                if total > 0.0 {
                    let pick = rng.weighted(&d2);
                    book.extend_from_slice(sub(pick));
                } else {
                    // Fewer distinct sub-vectors than words: synthesize a
                    // distinct word by a deterministic nudge.
                    let mut v = sub(first).to_vec();
                    v[0] += T::of(1e-4 * chosen as f64);
                    book.extend_from_slice(&v);
                }
                chosen += 1;
            }
            words.push(book);
        }
        let mut cb = Self { dim, n_books, n_words, d_sub, words };
        cb.dedup_words();
        Ok(cb)
    }

    fn check_input(&self, x: &Tensor<T>, op: &'static str) -> Result<usize> {
        if x.shape().len() != 2 || x.shape()[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "assign_codes",
                detail: format!("{op} expects [n, {}], got {:?}", self.dim, x.shape()),
            });
        }
        Ok(x.shape()[0])
    }

    /// Nearest-codeword index per row per book; ties break to the lowest
    /// index (strict-improvement scan).
    pub fn assign_codes(&self, x: &Tensor<T>) -> Result<CodeAssignment> {
        let n = self.check_input(x, "assign_codes")?;
        let mut codes = Vec::with_capacity(n * self.n_books);
        for i in 0..n {
            for m in 0..self.n_books {
                let (lo, hi) = Self::span(self.dim, self.d_sub, m);
                let sub = &x.data()[i * self.dim + lo..i * self.dim + hi];
                let w = hi - lo;
                let mut best = 0u16;
                let mut best_d = f64::INFINITY;
                for e in 0..self.n_words {
                    let word = &self.words[m][e * w..(e + 1) * w];
                    let mut acc = 0.0f64;
                    for (a, b) in sub.iter().zip(word) {
                        let diff = a.as_f64() - b.as_f64();
                        acc += diff * diff;
                    }
                    if acc < best_d {
                        best_d = acc;
                        best = e as u16;
                    }
                }
                codes.push(best);
            }
        }
        Ok(CodeAssignment { n, n_books: self.n_books, codes })
    }

    /// Mean (over rows) total squared distance between each sub-vector and
    /// its assigned codeword. Non-negative; zero iff every row sits exactly
    /// on a word concatenation.
    pub fn quantization_error(&self, x: &Tensor<T>, codes: &CodeAssignment) -> Result<T> {
        let n = self.check_input(x, "quantization_error")?;
        if codes.n != n || codes.n_books != self.n_books {
            return Err(Error::ShapeMismatch {
                op: "quantization_error",
                detail: format!(
                    "assignment covers {}x{}, data is {}x{}",
                    codes.n, codes.n_books, n, self.n_books
                ),
            });
        }
        if n == 0 {
            return Ok(T::zero());
        }
        let mut total = 0.0f64;
        for i in 0..n {
            for m in 0..self.n_books {
                let (lo, hi) = Self::span(self.dim, self.d_sub, m);
                let sub = &x.data()[i * self.dim + lo..i * self.dim + hi];
                let word = self.word(m, usize::from(codes.codes[i * self.n_books + m]));
                for (a, b) in sub.iter().zip(word) {
                    let diff = a.as_f64() - b.as_f64();
                    total += diff * diff;
                }
            }
        }
        Ok(T::of(total / n as f64))
    }

    /// Reconstruct one row from its codes (concatenated codewords).
    pub fn decode(&self, codes: &[u16]) -> Result<Vec<T>> {
        if codes.len() != self.n_books {
            return Err(Error::ShapeMismatch {
                op: "decode",
                detail: format!("{} codes for {} books", codes.len(), self.n_books),
            });
        }
        let mut out = Vec::with_capacity(self.dim);
        for (m, &e) in codes.iter().enumerate() {
            out.extend_from_slice(self.word(m, usize::from(e)));
        }
        Ok(out)
    }

    /// One hard cluster-refit step every `period` calls: assign rows to
    /// nearest words, move words to their cluster means, and re-seed empty
    /// words to the highest-error sub-vectors. A no-op (returning false)
    /// when `step % period != 0` or the batch is empty.
    pub fn update_codebooks(&mut self, x: &Tensor<T>, step: u64, period: u64) -> Result<bool> {
        let n = self.check_input(x, "update_codebooks")?;
        if period == 0 {
            return Err(Error::Config("codebook update period must be positive".into()));
        }
        if step % period != 0 || n == 0 {
            return Ok(false);
        }
        let assign = self.assign_codes(x)?;
        for m in 0..self.n_books {
            let (lo, hi) = Self::span(self.dim, self.d_sub, m);
            let w = hi - lo;
            let mut sums = vec![0.0f64; self.n_words * w];
            let mut counts = vec![0usize; self.n_words];
            for i in 0..n {
                let e = usize::from(assign.codes[i * self.n_books + m]);
                counts[e] += 1;
                let sub = &x.data()[i * self.dim + lo..i * self.dim + hi];
                for (s, a) in sums[e * w..(e + 1) * w].iter_mut().zip(sub) {
                    *s += a.as_f64();
                }
            }
            for e in 0..self.n_words {
                if counts[e] == 0 {
                    continue;
                }
                let inv = 1.0 / counts[e] as f64;
                for (dst, &s) in self.words[m][e * w..(e + 1) * w].iter_mut().zip(&sums[e * w..(e + 1) * w]) {
                    *dst = T::of(s * inv);
                }
            }

            // Re-seed empty words onto the sub-vectors the book currently
            // represents worst, largest error first.
            let empties: Vec<usize> = (0..self.n_words).filter(|&e| counts[e] == 0).collect();
            if !empties.is_empty() {
                let mut errs: Vec<(f64, usize)> = (0..n)
                    .map(|i| {
                        let e = usize::from(assign.codes[i * self.n_books + m]);
                        let word = &self.words[m][e * w..(e + 1) * w];
                        let sub = &x.data()[i * self.dim + lo..i * self.dim + hi];
                        let mut acc = 0.0f64;
                        for (a, b) in sub.iter().zip(word) {
                            let diff = a.as_f64() - b.as_f64();
                            acc += diff * diff;
                        }
                        (acc, i)
                    })
                    .collect();
                errs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite errors").then(a.1.cmp(&b.1)));
                for (slot, &e) in empties.iter().enumerate() {
                    let i = errs[slot.min(errs.len() - 1)].1;
                    let sub = &x.data()[i * self.dim + lo..i * self.dim + hi];
                    self.words[m][e * w..(e + 1) * w].copy_from_slice(sub);
                }
            }
        }
        self.dedup_words();
        Ok(true)
    }

    /// Guarantee no two identical words inside one book: the higher-index
    /// twin is nudged deterministically. A fresh assignment can always fall
    /// back to the kept twin at the same distance, so the reachable error
    /// never increases.
    fn dedup_words(&mut self) {
        for m in 0..self.n_books {
            let w = self.book_width(m);
            for e in 1..self.n_words {
                let mut bump = 1usize;
                while (0..e).any(|prev| {
                    self.words[m][prev * w..(prev + 1) * w] == self.words[m][e * w..(e + 1) * w]
                }) {
                    self.words[m][e * w] += T::of(1e-5 * bump as f64);
                    bump += 1;
                }
            }
        }
    }

    // ── serialization ───────────────────────────────────────────────

    /// Flat little-endian blob: header `[n_books, n_words, d_sub]` as u32,
    /// then every book's words in order, in the element's native width.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.n_books as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_words as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_sub as u32).to_le_bytes());
        for book in &self.words {
            for &v in book {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Checkpoint("codebook blob shorter than its header".into()));
        }
        let n_books = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let n_words = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let d_sub = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if n_books == 0 || n_words == 0 || d_sub == 0 {
            return Err(Error::Checkpoint("codebook header has a zero field".into()));
        }
        if body.len() % T::BYTES != 0 {
            return Err(Error::Checkpoint(format!(
                "codebook body of {} bytes is not a multiple of element width {}",
                body.len(),
                T::BYTES
            )));
        }
        let total = body.len() / T::BYTES;
        if total % n_words != 0 {
            return Err(Error::Checkpoint(format!("{total} values do not divide into {n_words} words")));
        }
        // Widths sum to the full dimension, so the dimension is implied.
        let dim = total / n_words;
        if dim <= (n_books - 1) * d_sub || dim > n_books * d_sub {
            return Err(Error::Checkpoint(format!(
                "dimension {dim} inconsistent with {n_books} books of width {d_sub}"
            )));
        }
        let mut words = Vec::with_capacity(n_books);
        let mut cursor = 0usize;
        for m in 0..n_books {
            let (lo, hi) = Self::span(dim, d_sub, m);
            let count = n_words * (hi - lo);
            let mut book = Vec::with_capacity(count);
            for _ in 0..count {
                book.push(T::read_le(&body[cursor..cursor + T::BYTES]));
                cursor += T::BYTES;
            }
            words.push(book);
        }
        Ok(Self { dim, n_books, n_words, d_sub, words })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Codebooks from the worked two-book example: book 0 holds 2-dim words
    /// with [0.3, 0.6] at index 1, book 1 holds [-1.0, 0.0] at index 2.
    fn two_book_example() -> Codebooks<f64> {
        Codebooks::from_words(
            4,
            3,
            vec![
                vec![5.0, 5.0, /* idx 1 */ 0.3, 0.6, -3.0, 2.0],
                vec![2.0, 2.0, 4.0, -4.0, /* idx 2 */ -1.0, 0.0],
            ],
        )
        .unwrap()
    }

    #[test]
    fn row_on_word_concatenation_assigns_and_reconstructs_exactly() {
        let cb = two_book_example();
        let x = Tensor::<f64>::from_rows(&[vec![0.3, 0.6, -1.0, 0.0]]);
        let codes = cb.assign_codes(&x).unwrap();
        assert_eq!(codes.row(0), &[1, 2]);
        assert_eq!(cb.decode(codes.row(0)).unwrap(), vec![0.3, 0.6, -1.0, 0.0]);
        let err = cb.quantization_error(&x, &codes).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn assignment_is_nearest_word_against_exhaustive_scan() {
        let mut rng = SeedRng::new(42);
        let x = Tensor::<f64>::randn(vec![40, 12], 1.0, &mut rng);
        let cb = Codebooks::init(&x, 4, 8, &mut rng).unwrap();
        let codes = cb.assign_codes(&x).unwrap();
        for i in 0..40 {
            for m in 0..cb.n_books() {
                let (lo, hi) = (m * 4, ((m + 1) * 4).min(12));
                let sub = &x.data()[i * 12 + lo..i * 12 + hi];
                let d = |e: usize| -> f64 {
                    cb.word(m, e).iter().zip(sub).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                let got = usize::from(codes.row(i)[m]);
                for e in 0..8 {
                    assert!(
                        d(got) <= d(e) + 1e-12,
                        "row {i} book {m}: word {got} is not nearest (beaten by {e})"
                    );
                }
            }
        }
    }

    #[test]
    fn equidistant_words_pick_the_lower_index() {
        let cb = Codebooks::from_words(1, 2, vec![vec![-1.0f64, 1.0]]).unwrap();
        let x = Tensor::<f64>::from_rows(&[vec![0.0]]);
        assert_eq!(cb.assign_codes(&x).unwrap().row(0), &[0]);
    }

    #[test]
    fn off_period_update_is_identity() {
        let mut rng = SeedRng::new(7);
        let x = Tensor::<f64>::randn(vec![32, 8], 1.0, &mut rng);
        let mut cb = Codebooks::init(&x, 4, 4, &mut rng).unwrap();
        let before = cb.clone();
        let updated = cb.update_codebooks(&x, 1, 20).unwrap();
        assert!(!updated);
        assert_eq!(cb, before, "step 1 of period 20 must not touch the words");
    }

    #[test]
    fn update_never_increases_fresh_assignment_error() {
        let rng = SeedRng::new(123);
        for batch in 0..20 {
            let mut brng = rng.split(batch);
            let x = Tensor::<f64>::randn(vec![48, 8], 1.0, &mut brng);
            let mut cb = Codebooks::init(&x, 4, 6, &mut brng).unwrap();
            for step in 1..=3u64 {
                let codes = cb.assign_codes(&x).unwrap();
                let before = cb.quantization_error(&x, &codes).unwrap();
                assert!(cb.update_codebooks(&x, step, 1).unwrap());
                let codes = cb.assign_codes(&x).unwrap();
                let after = cb.quantization_error(&x, &codes).unwrap();
                assert!(
                    after <= before + 1e-9,
                    "batch {batch} step {step}: error rose {before} -> {after}"
                );
            }
        }
    }

    #[test]
    fn empty_words_are_reseeded_to_worst_represented_rows() {
        // Two tight clusters, four words: after one update every word must
        // be distinct and no word may stay on the far-away initial outlier.
        let mut rows = Vec::new();
        for i in 0..8 {
            rows.push(vec![0.0 + 0.01 * i as f64, 0.0]);
            rows.push(vec![5.0 + 0.01 * i as f64, 5.0]);
        }
        let x = Tensor::<f64>::from_rows(&rows);
        let mut cb = Codebooks::from_words(
            2,
            4,
            vec![vec![0.0, 0.0, 5.0, 5.0, 100.0, 100.0, -100.0, -100.0]],
        )
        .unwrap();
        let before = {
            let codes = cb.assign_codes(&x).unwrap();
            cb.quantization_error(&x, &codes).unwrap()
        };
        cb.update_codebooks(&x, 1, 1).unwrap();
        let codes = cb.assign_codes(&x).unwrap();
        let after = cb.quantization_error(&x, &codes).unwrap();
        assert!(after <= before + 1e-9);
        let used: std::collections::BTreeSet<u16> = codes.codes.iter().copied().collect();
        assert!(used.len() >= 3, "re-seeded words should attract assignments, got {used:?}");
        for e in 0..4 {
            assert!(cb.word(0, e)[0].abs() < 50.0, "word {e} still at an unused outlier");
        }
    }

    #[test]
    fn no_duplicate_words_after_update() {
        // All rows identical: means collapse, dedup must keep words distinct.
        let x = Tensor::<f64>::from_rows(&(0..16).map(|_| vec![1.0, 2.0]).collect::<Vec<_>>());
        let mut cb = Codebooks::from_words(2, 3, vec![vec![1.0, 1.1, 1.2], vec![2.0, 2.1, 2.2]]).unwrap();
        cb.update_codebooks(&x, 1, 1).unwrap();
        for m in 0..2 {
            for a in 0..3 {
                for b in (a + 1)..3 {
                    assert_ne!(cb.word(m, a), cb.word(m, b), "book {m} words {a} and {b} collide");
                }
            }
        }
    }

    #[test]
    fn serialization_roundtrips_including_ragged_last_book() {
        let mut rng = SeedRng::new(9);
        let x = Tensor::<f32>::randn(vec![24, 10], 1.0, &mut rng);
        let cb = Codebooks::init(&x, 4, 5, &mut rng).unwrap(); // books of width 4, 4, 2
        assert_eq!(cb.n_books(), 3);
        assert_eq!(cb.book_width(2), 2);
        let blob = cb.to_bytes();
        assert_eq!(
            blob.len(),
            12 + 4 * cb.param_count(),
            "header plus f32 words"
        );
        let back = Codebooks::<f32>::from_bytes(&blob).unwrap();
        assert_eq!(back, cb);
    }

    #[test]
    fn truncated_blob_is_a_checkpoint_error() {
        let cb = two_book_example();
        let blob = cb.to_bytes();
        assert!(Codebooks::<f64>::from_bytes(&blob[..10]).is_err());
        // Chopping values off the body breaks the word count consistency.
        assert!(Codebooks::<f64>::from_bytes(&blob[..blob.len() - 8]).is_err());
    }

    #[test]
    fn init_words_are_distinct_input_subvectors() {
        let mut rng = SeedRng::new(31);
        let x = Tensor::<f64>::randn(vec![64, 8], 1.0, &mut rng);
        let cb = Codebooks::init(&x, 8, 16, &mut rng).unwrap();
        for a in 0..16 {
            for b in (a + 1)..16 {
                assert_ne!(cb.word(0, a), cb.word(0, b));
            }
        }
    }

    #[test]
    fn empty_batch_update_is_a_no_op() {
        let mut cb = two_book_example();
        let before = cb.clone();
        let x = Tensor::<f64>::zeros(vec![0, 4]);
        assert!(!cb.update_codebooks(&x, 20, 20).unwrap());
        assert_eq!(cb, before);
    }
}
