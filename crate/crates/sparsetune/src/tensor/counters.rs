//! Deterministic cost accounting: FLOPs, live-buffer bytes, and stored
//! attention entries.
//!
//! FLOPs count multiply-add pairs of matrix products only (dense matmul,
//! sampled dense-dense products, sparse-dense products, quantizer distance
//! scans, selector comparisons). Elementwise work is free by convention, so
//! two runs of the same graph always report the same number.
//!
//! Byte accounting is exact live-buffer bookkeeping: allocation raises the
//! current level, release lowers it, and the peak is the high-water mark.

use std::collections::BTreeMap;

/// Snapshot of everything measured inside one scope.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostCounters {
    /// Multiply-add pairs of matrix-product work.
    pub flops: u64,
    /// Live buffer bytes at the end of the scope (never above `peak_bytes`).
    pub current_bytes: u64,
    /// High-water mark of live buffer bytes inside the scope.
    pub peak_bytes: u64,
    /// Attention values materialized (dense rows count n per row, sparse
    /// rows count their stored entries).
    pub attention_entries: u64,
    /// FLOPs attributed per operation kind.
    pub flops_by_op: BTreeMap<&'static str, u64>,
    /// FLOPs attributed per enclosing module label (see `module_scope`).
    pub flops_by_module: BTreeMap<String, u64>,
}

#[derive(Default)]
struct Frame {
    flops: u64,
    current: i64,
    peak: i64,
    attention_entries: u64,
    by_op: BTreeMap<&'static str, u64>,
    by_module: BTreeMap<String, u64>,
}

impl Frame {
    fn snapshot(&self) -> CostCounters {
        CostCounters {
            flops: self.flops,
            current_bytes: self.current.max(0) as u64,
            peak_bytes: self.peak.max(0) as u64,
            attention_entries: self.attention_entries,
            flops_by_op: self.by_op.clone(),
            flops_by_module: self.by_module.clone(),
        }
    }
}

/// Stack of measurement frames. Every event updates all open frames, so
/// scopes nest without double bookkeeping on anyone's part.
pub(crate) struct CounterStack {
    frames: Vec<Frame>,
    modules: Vec<String>,
}

impl CounterStack {
    pub(crate) fn new() -> Self {
        // The root frame lives for the whole tape and backs `Tape::totals`.
        Self { frames: vec![Frame::default()], modules: Vec::new() }
    }

    pub(crate) fn push(&mut self) {
        self.frames.push(Frame::default());
    }

    pub(crate) fn pop(&mut self) -> CostCounters {
        debug_assert!(self.frames.len() > 1, "cannot pop the root counter frame");
        let frame = self.frames.pop().expect("counter frame");
        frame.snapshot()
    }

    pub(crate) fn root(&self) -> CostCounters {
        self.frames[0].snapshot()
    }

    pub(crate) fn push_module(&mut self, name: &str) {
        self.modules.push(name.to_string());
    }

    pub(crate) fn pop_module(&mut self) {
        self.modules.pop();
    }

    pub(crate) fn add_flops(&mut self, op: &'static str, n: u64) {
        if n == 0 {
            return;
        }
        let module = self.modules.last().cloned();
        for frame in &mut self.frames {
            frame.flops += n;
            *frame.by_op.entry(op).or_insert(0) += n;
            if let Some(m) = &module {
                *frame.by_module.entry(m.clone()).or_insert(0) += n;
            }
        }
    }

    pub(crate) fn alloc(&mut self, bytes: u64) {
        for frame in &mut self.frames {
            frame.current += bytes as i64;
            frame.peak = frame.peak.max(frame.current);
        }
    }

    pub(crate) fn release(&mut self, bytes: u64) {
        for frame in &mut self.frames {
            frame.current -= bytes as i64;
        }
    }

    pub(crate) fn add_attention_entries(&mut self, n: u64) {
        for frame in &mut self.frames {
            frame.attention_entries += n;
        }
    }
}
