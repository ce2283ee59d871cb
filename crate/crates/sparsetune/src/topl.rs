//! Indicator-similarity top-L key selection.
//!
//! The similarity between a query and a key is the number of codebooks in
//! which their quantized codes agree — an integer in [0, M]. Selection
//! bucket-sorts candidates by that score: M+1 buckets of capacity L, where
//! a full bucket overwrites its last slot (keeping the first L-1 inserts
//! plus the most recent one), then drains buckets from score M downward
//! until L keys are collected. Candidates are scanned from the highest key
//! index down, so equal scores resolve in favor of more recent keys — a
//! recency prior that suits causal attention. The procedure is fully
//! deterministic and the multiset of selected scores always equals the
//! true top-L score multiset.

use crate::csr::CsrPattern;
use crate::error::{Error, Result};
use crate::pq::CodeAssignment;

/// Number of codebooks in which the two code rows agree.
pub fn indicator_score(cq: &[u16], ck: &[u16]) -> usize {
    assert_eq!(cq.len(), ck.len(), "code rows must cover the same books");
    cq.iter().zip(ck).filter(|(a, b)| a == b).count()
}

/// Per-query selected key indices, in retrieval order (descending score,
/// descending key index within a score).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopLIndices {
    pub n_queries: usize,
    pub n_keys: usize,
    /// Requested keys per query; early causal rows hold fewer.
    pub l: usize,
    pub rows: Vec<Vec<usize>>,
    /// Total query-key pairs scanned (the selector's comparison cost).
    pub candidates_scanned: u64,
}

impl TopLIndices {
    /// Total stored entries across all rows.
    pub fn stored_entries(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Concatenate rows into a CSR pattern over `n_keys` columns, keeping
    /// each row's retrieval order.
    pub fn build_csr(&self) -> CsrPattern {
        CsrPattern::from_rows(self.n_keys, &self.rows)
            .expect("selection rows are valid column indices by construction")
    }
}

/// Select (up to) the L highest-indicator keys for every query.
///
/// With `causal` set, query i only sees keys 0..=i, so row i holds
/// `min(l, i + 1)` entries; otherwise every row holds `min(l, n_keys)`.
pub fn select_topl(cq: &CodeAssignment, ck: &CodeAssignment, l: usize, causal: bool) -> Result<TopLIndices> {
    if l == 0 {
        return Err(Error::Config("top-L selection needs L >= 1".into()));
    }
    if cq.n_books != ck.n_books {
        return Err(Error::Config(format!(
            "query codes cover {} books, key codes {}",
            cq.n_books, ck.n_books
        )));
    }
    if causal && cq.n != ck.n {
        return Err(Error::Config(format!(
            "causal selection requires matching counts, got {} queries and {} keys",
            cq.n, ck.n
        )));
    }
    let m = cq.n_books;
    let mut rows = Vec::with_capacity(cq.n);
    let mut scanned = 0u64;

    // Bucket scratch, reused across queries: (M+1) buckets x L slots plus a
    // valid-entry count per bucket.
    let mut buckets = vec![0usize; (m + 1) * l];
    let mut fill = vec![0usize; m + 1];

    for i in 0..cq.n {
        fill.iter_mut().for_each(|f| *f = 0);
        let candidates = if causal { i + 1 } else { ck.n };
        scanned += candidates as u64;
        let qrow = cq.row(i);
        for j in (0..candidates).rev() {
            let s = indicator_score(qrow, ck.row(j));
            let slot = if fill[s] < l {
                let slot = fill[s];
                fill[s] += 1;
                slot
            } else {
                l - 1 // overflow: overwrite the last slot
            };
            debug_assert!(slot <= l - 1, "bucket write past capacity");
            buckets[s * l + slot] = j;
        }
        let mut row = Vec::with_capacity(l.min(candidates));
        'drain: for s in (0..=m).rev() {
            for slot in 0..fill[s] {
                if row.len() == l {
                    break 'drain;
                }
                row.push(buckets[s * l + slot]);
            }
        }
        rows.push(row);
    }
    Ok(TopLIndices { n_queries: cq.n, n_keys: ck.n, l, rows, candidates_scanned: scanned })
}
