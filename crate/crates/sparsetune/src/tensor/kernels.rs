//! Raw numeric kernels behind the tape operations.
//!
//! Every kernel accumulates into its output slice (`out[i] += ...`), which
//! lets forward passes (fresh zeroed buffers) and gradient accumulation share
//! one code path. Shape checking happens at the tape layer; kernels only
//! carry debug assertions.

use crate::csr::CsrPattern;
use crate::tensor::Element;

// ── Dense matrix products ───────────────────────────────────────────────

/// out[m,p] += a[m,k] * b[k,p]
pub fn matmul_nn<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            if a_ik == T::zero() {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
}

/// out[m,k] += a[m,p] * b[k,p]^T   (rows of `b` are dotted with rows of `a`)
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, k: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for kk in 0..k {
            let b_row = &b[kk * p..(kk + 1) * p];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + kk] += acc;
        }
    }
}

/// out[k,p] += a[m,k]^T * b[m,p]
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(out.len(), k * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * p..(i + 1) * p];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            if a_ik == T::zero() {
                continue;
            }
            let out_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_ij;
            }
        }
    }
}

// ── Row softmax (dense) ─────────────────────────────────────────────────

/// Numerically stable softmax over each row. `keep`, when present, marks the
/// entries that participate; the rest become exactly zero. Returns the index
/// of the first row with no kept entries, if any.
pub fn row_softmax<T: Element>(
    x: &[T],
    keep: Option<&[bool]>,
    out: &mut [T],
    rows: usize,
    cols: usize,
) -> std::result::Result<(), usize> {
    debug_assert_eq!(x.len(), rows * cols);
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let krow = keep.map(|k| &k[i * cols..(i + 1) * cols]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if krow.map_or(true, |k| k[j]) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(i);
        }
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if krow.map_or(true, |k| k[j]) {
                let e = (v - max).exp();
                orow[j] = e;
                sum += e;
            } else {
                orow[j] = T::zero();
            }
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(())
}

/// dx[i,j] += y[i,j] * (dy[i,j] - sum_k dy[i,k] y[i,k]); masked entries have
/// y == 0 and therefore receive no gradient.
pub fn row_softmax_grad<T: Element>(y: &[T], dy: &[T], dx: &mut [T], rows: usize, cols: usize) {
    for i in 0..rows {
        let yr = &y[i * cols..(i + 1) * cols];
        let dyr = &dy[i * cols..(i + 1) * cols];
        let mut dot = T::zero();
        for (&a, &b) in yr.iter().zip(dyr) {
            dot += a * b;
        }
        let dxr = &mut dx[i * cols..(i + 1) * cols];
        for j in 0..cols {
            dxr[j] += yr[j] * (dyr[j] - dot);
        }
    }
}

// ── Layer normalization ─────────────────────────────────────────────────

/// Row-wise layer norm with affine parameters: out = gamma * (x-mu)/s + beta.
pub fn layer_norm<T: Element>(x: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T], rows: usize, cols: usize) {
    let n = T::of(cols as f64);
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var = var / n;
        let inv = (var + eps).sqrt().recip();
        let orow = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols {
            orow[j] = gamma[j] * (row[j] - mean) * inv + beta[j];
        }
    }
}

/// Gradients of layer norm for input, gain, and shift.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_grad<T: Element>(
    x: &[T],
    gamma: &[T],
    eps: T,
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
    rows: usize,
    cols: usize,
) {
    let n = T::of(cols as f64);
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let dyr = &dy[i * cols..(i + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var = var / n;
        let inv = (var + eps).sqrt().recip();

        // x_hat and the two row means needed by the input gradient.
        let mut mean_g = T::zero(); // mean of gamma*dy
        let mut mean_gx = T::zero(); // mean of gamma*dy*x_hat
        for j in 0..cols {
            let xh = (row[j] - mean) * inv;
            let g = gamma[j] * dyr[j];
            mean_g += g;
            mean_gx += g * xh;
        }
        mean_g = mean_g / n;
        mean_gx = mean_gx / n;

        for j in 0..cols {
            let xh = (row[j] - mean) * inv;
            if let Some(dx) = dx.as_deref_mut() {
                let g = gamma[j] * dyr[j];
                dx[i * cols + j] += (g - mean_g - xh * mean_gx) * inv;
            }
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[j] += dyr[j] * xh;
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[j] += dyr[j];
            }
        }
    }
}

// ── Pointwise activations ───────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * sech2 * du
}

// ── Cross entropy over logits ───────────────────────────────────────────

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`. Stable log-sum-exp evaluation.
pub fn cross_entropy<T: Element>(logits: &[T], targets: &[usize], rows: usize, cols: usize) -> T {
    let mut total = T::zero();
    for i in 0..rows {
        let row = &logits[i * cols..(i + 1) * cols];
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        total += sum.ln() + max - row[targets[i]];
    }
    total / T::of(rows as f64)
}

/// dlogits[i,j] += upstream * (softmax(logits)[i,j] - [j == target_i]) / rows
pub fn cross_entropy_grad<T: Element>(
    logits: &[T],
    targets: &[usize],
    upstream: T,
    dlogits: &mut [T],
    rows: usize,
    cols: usize,
) {
    let scale = upstream / T::of(rows as f64);
    for i in 0..rows {
        let row = &logits[i * cols..(i + 1) * cols];
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let drow = &mut dlogits[i * cols..(i + 1) * cols];
        for j in 0..cols {
            let p = (row[j] - max).exp() / sum;
            let ind = if j == targets[i] { T::one() } else { T::zero() };
            drow[j] += scale * (p - ind);
        }
    }
}

// ── Sparse attention products ───────────────────────────────────────────

/// Sampled dense-dense product: for each stored (i, j), out_e += q_i . k_j.
pub fn sddmm<T: Element>(q: &[T], k: &[T], pat: &CsrPattern, out: &mut [T], d: usize) {
    debug_assert_eq!(out.len(), pat.nnz());
    for i in 0..pat.n_rows {
        let qi = &q[i * d..(i + 1) * d];
        for e in pat.indptr[i]..pat.indptr[i + 1] {
            let kj = &k[pat.indices[e] * d..(pat.indices[e] + 1) * d];
            let mut acc = T::zero();
            for (&a, &b) in qi.iter().zip(kj) {
                acc += a * b;
            }
            out[e] += acc;
        }
    }
}

/// Gradients of sddmm into q and/or k.
pub fn sddmm_grad<T: Element>(
    q: &[T],
    k: &[T],
    pat: &CsrPattern,
    dvals: &[T],
    dq: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    d: usize,
) {
    let mut dq = dq;
    let mut dk = dk;
    for i in 0..pat.n_rows {
        for e in pat.indptr[i]..pat.indptr[i + 1] {
            let j = pat.indices[e];
            let g = dvals[e];
            if let Some(dq) = dq.as_deref_mut() {
                let kj = &k[j * d..(j + 1) * d];
                let dqi = &mut dq[i * d..(i + 1) * d];
                for (o, &v) in dqi.iter_mut().zip(kj) {
                    *o += g * v;
                }
            }
            if let Some(dk) = dk.as_deref_mut() {
                let qi = &q[i * d..(i + 1) * d];
                let dkj = &mut dk[j * d..(j + 1) * d];
                for (o, &v) in dkj.iter_mut().zip(qi) {
                    *o += g * v;
                }
            }
        }
    }
}

/// Softmax over each row's stored entries. `keep`, when present, is per
/// stored entry; kept-out entries become exactly zero. Empty rows are
/// allowed (they stay empty); a row whose entries are all masked is an
/// error reported as its row index.
pub fn sparse_row_softmax<T: Element>(
    vals: &[T],
    pat: &CsrPattern,
    keep: Option<&[bool]>,
    out: &mut [T],
) -> std::result::Result<(), usize> {
    for i in 0..pat.n_rows {
        let (lo, hi) = (pat.indptr[i], pat.indptr[i + 1]);
        if lo == hi {
            continue;
        }
        let mut max = T::neg_infinity();
        for e in lo..hi {
            if keep.map_or(true, |k| k[e]) && vals[e] > max {
                max = vals[e];
            }
        }
        if max == T::neg_infinity() {
            return Err(i);
        }
        let mut sum = T::zero();
        for e in lo..hi {
            if keep.map_or(true, |k| k[e]) {
                let x = (vals[e] - max).exp();
                out[e] = x;
                sum += x;
            } else {
                out[e] = T::zero();
            }
        }
        for e in lo..hi {
            out[e] = out[e] / sum;
        }
    }
    Ok(())
}

/// Row-segment softmax gradient: same formula as the dense case, restricted
/// to each row's stored entries.
pub fn sparse_row_softmax_grad<T: Element>(y: &[T], dy: &[T], pat: &CsrPattern, dx: &mut [T]) {
    for i in 0..pat.n_rows {
        let (lo, hi) = (pat.indptr[i], pat.indptr[i + 1]);
        let mut dot = T::zero();
        for e in lo..hi {
            dot += y[e] * dy[e];
        }
        for e in lo..hi {
            dx[e] += y[e] * (dy[e] - dot);
        }
    }
}

/// Sparse-dense product: out[i,:] += sum over stored (i,j) of a_e * v[j,:].
pub fn spmm<T: Element>(vals: &[T], v: &[T], pat: &CsrPattern, out: &mut [T], d: usize) {
    for i in 0..pat.n_rows {
        let orow_start = i * d;
        for e in pat.indptr[i]..pat.indptr[i + 1] {
            let a = vals[e];
            if a == T::zero() {
                continue;
            }
            let vrow = &v[pat.indices[e] * d..(pat.indices[e] + 1) * d];
            let orow = &mut out[orow_start..orow_start + d];
            for (o, &x) in orow.iter_mut().zip(vrow) {
                *o += a * x;
            }
        }
    }
}

/// Gradients of spmm into the stored values and/or the dense operand.
pub fn spmm_grad<T: Element>(
    vals: &[T],
    v: &[T],
    pat: &CsrPattern,
    dy: &[T],
    dvals: Option<&mut [T]>,
    dv: Option<&mut [T]>,
    d: usize,
) {
    let mut dvals = dvals;
    let mut dv = dv;
    for i in 0..pat.n_rows {
        let dyr = &dy[i * d..(i + 1) * d];
        for e in pat.indptr[i]..pat.indptr[i + 1] {
            let j = pat.indices[e];
            if let Some(dvals) = dvals.as_deref_mut() {
                let vrow = &v[j * d..(j + 1) * d];
                let mut acc = T::zero();
                for (&a, &b) in dyr.iter().zip(vrow) {
                    acc += a * b;
                }
                dvals[e] += acc;
            }
            if let Some(dv) = dv.as_deref_mut() {
                let a = vals[e];
                let dvr = &mut dv[j * d..(j + 1) * d];
                for (o, &b) in dvr.iter_mut().zip(dyr) {
                    *o += a * b;
                }
            }
        }
    }
}
