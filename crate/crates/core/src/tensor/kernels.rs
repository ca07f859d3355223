//! Forward and backward kernels.
//!
//! Slice-level routines (`gemm_*`, `dot`, `axpy`) take explicit dimensions and
//! are what the model's inner loops call. The `Tensor` wrappers validate shapes.

use super::{c, Scalar, Tensor};
use crate::error::{Error, Result};

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (xa, xb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for j in 0..8 {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m,n] (+)= a[m,k] · b[k,n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(T::zero());
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// `out[k,n] (+)= a[m,k]ᵀ · b[m,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if !accumulate {
        out.fill(T::zero());
    }
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `out[m,k] (+)= a[m,n] · b[k,n]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let v = dot(arow, &b[j * n..(j + 1) * n]);
            if accumulate {
                out[i * k + j] += v;
            } else {
                out[i * k + j] = v;
            }
        }
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, "rank-2 tensor", format!("{s:?}"))),
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dim {k}"), k2));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(a.data(), b.data(), out.data_mut(), m, k, n, false);
    Ok(out)
}

/// Gradients of `C = A·B` given `dC`: returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = dims2(a, "matmul_backward")?;
    let (_, n) = dims2(b, "matmul_backward")?;
    if dc.shape() != [m, n] {
        return Err(Error::shape(
            "matmul_backward",
            format!("[{m}, {n}]"),
            format!("{:?}", dc.shape()),
        ));
    }
    let mut da = Tensor::zeros(&[m, k]);
    gemm_nt(dc.data(), b.data(), da.data_mut(), m, n, k, false);
    let mut db = Tensor::zeros(&[k, n]);
    gemm_tn(a.data(), dc.data(), db.data_mut(), m, k, n, false);
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// RMSNorm
// ---------------------------------------------------------------------------

/// Row-wise RMS normalization on raw slices; writes `out` and the per-row
/// inverse RMS needed by the backward.
pub fn rmsnorm_rows<T: Scalar>(x: &[T], weight: &[T], eps: T, out: &mut [T], inv_rms: &mut [T]) {
    let d = weight.len();
    let dn = c::<T>(d as f64);
    for (t, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms = dot(xr, xr) / dn;
        let r = T::one() / (ms + eps).sqrt();
        inv_rms[t] = r;
        for i in 0..d {
            or[i] = weight[i] * xr[i] * r;
        }
    }
}

/// Backward of [`rmsnorm_rows`]. Accumulates into `dx` and `dweight`.
pub fn rmsnorm_rows_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    inv_rms: &[T],
    dy: &[T],
    dx: &mut [T],
    dweight: Option<&mut [T]>,
) {
    let d = weight.len();
    let dn = c::<T>(d as f64);
    let mut dw = dweight;
    for t in 0..inv_rms.len() {
        let xr = &x[t * d..(t + 1) * d];
        let gr = &dy[t * d..(t + 1) * d];
        let r = inv_rms[t];
        let mut proj = T::zero();
        for i in 0..d {
            proj += weight[i] * gr[i] * xr[i];
        }
        let k = r * r * r * proj / dn;
        let dxr = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            dxr[i] += r * weight[i] * gr[i] - k * xr[i];
        }
        if let Some(dw) = dw.as_deref_mut() {
            for i in 0..d {
                dw[i] += gr[i] * xr[i] * r;
            }
        }
    }
}

pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (seq, d) = dims2(x, "rmsnorm")?;
    if weight.shape() != [d] || d == 0 {
        return Err(Error::shape(
            "rmsnorm",
            format!("weight [{d}]"),
            format!("{:?}", weight.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[seq, d]);
    let mut inv = vec![T::zero(); seq];
    rmsnorm_rows(x.data(), weight.data(), eps, out.data_mut(), &mut inv);
    Ok(out)
}

/// Returns `(dx, dweight)`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (seq, d) = dims2(x, "rmsnorm_backward")?;
    if dy.shape() != x.shape() || weight.shape() != [d] {
        return Err(Error::shape(
            "rmsnorm_backward",
            format!("{:?}", x.shape()),
            format!("{:?}", dy.shape()),
        ));
    }
    let mut scratch = vec![T::zero(); seq * d];
    let mut inv = vec![T::zero(); seq];
    rmsnorm_rows(x.data(), weight.data(), eps, &mut scratch, &mut inv);
    let mut dx = Tensor::zeros(&[seq, d]);
    let mut dw = Tensor::zeros(&[d]);
    rmsnorm_rows_backward(
        x.data(),
        weight.data(),
        &inv,
        dy.data(),
        dx.data_mut(),
        Some(dw.data_mut()),
    );
    Ok((dx, dw))
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// In-place stable softmax of one row. Fails if every entry is `-inf`.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> bool {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    true
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, m) = dims2(x, "softmax_rows")?;
    let mut out = x.clone();
    if m == 0 {
        return Ok(out);
    }
    for (i, row) in out.data_mut().chunks_exact_mut(m).enumerate() {
        if !softmax_in_place(row) {
            return Err(Error::EmptyAttentionRow { row: i });
        }
    }
    Ok(out)
}

/// Writes `dx = y ⊙ (dy − Σ dy⊙y)` for one row.
#[inline]
pub fn softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let s = dot(y, dy);
    for i in 0..y.len() {
        dx[i] = y[i] * (dy[i] - s);
    }
}

/// Backward given the forward *output* `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, m) = dims2(y, "softmax_rows_backward")?;
    if dy.shape() != y.shape() {
        return Err(Error::shape(
            "softmax_rows_backward",
            format!("{:?}", y.shape()),
            format!("{:?}", dy.shape()),
        ));
    }
    let mut dx = Tensor::zeros_like(y);
    if m == 0 {
        return Ok(dx);
    }
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(m)
        .zip(dy.data().chunks_exact(m))
        .zip(dx.data_mut().chunks_exact_mut(m))
    {
        softmax_row_backward(yr, gr, dr);
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Rotary position embedding
// ---------------------------------------------------------------------------

/// Rotates consecutive pairs of a `[seq, heads, d_head]` buffer in place.
/// `direction` is +1 for the forward rotation and -1 for its inverse (the
/// backward of a rotation is the rotation by the negated angle).
pub fn rope_in_place<T: Scalar>(
    data: &mut [T],
    seq: usize,
    heads: usize,
    d_head: usize,
    base: f64,
    position_offset: usize,
    direction: f64,
) {
    let half = d_head / 2;
    for t in 0..seq {
        let pos = (t + position_offset) as f64;
        for i in 0..half {
            let theta = pos / base.powf(2.0 * i as f64 / d_head as f64);
            let (s, co) = (direction * theta).sin_cos();
            let (s, co) = (c::<T>(s), c::<T>(co));
            for h in 0..heads {
                let o = (t * heads + h) * d_head + 2 * i;
                let (a, b) = (data[o], data[o + 1]);
                data[o] = a * co - b * s;
                data[o + 1] = a * s + b * co;
            }
        }
    }
}

fn rope_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [s, h, d] => {
            if d % 2 != 0 {
                return Err(Error::Config(format!(
                    "rotary embedding needs an even head width, got {d}"
                )));
            }
            Ok((*s, *h, *d))
        }
        s => Err(Error::shape("rope_apply", "[seq, heads, d_head]", format!("{s:?}"))),
    }
}

pub fn rope_apply<T: Scalar>(x: &Tensor<T>, base: f64, position_offset: usize) -> Result<Tensor<T>> {
    let (s, h, d) = rope_dims(x)?;
    let mut out = x.clone();
    rope_in_place(out.data_mut(), s, h, d, base, position_offset, 1.0);
    Ok(out)
}

/// Backward of [`rope_apply`]: the transpose of a rotation is its inverse.
pub fn rope_backward<T: Scalar>(dy: &Tensor<T>, base: f64, position_offset: usize) -> Result<Tensor<T>> {
    let (s, h, d) = rope_dims(dy)?;
    let mut out = dy.clone();
    rope_in_place(out.data_mut(), s, h, d, base, position_offset, -1.0);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

/// Mean next-token negative log-likelihood over positions whose target is not
/// `ignore_index`, plus its gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], ignore_index: usize) -> Result<(T, Tensor<T>)> {
    let (seq, vocab) = dims2(logits, "cross_entropy")?;
    if targets.len() != seq {
        return Err(Error::shape("cross_entropy", format!("{seq} targets"), targets.len()));
    }
    let count = targets.iter().filter(|&&t| t != ignore_index).count();
    if count == 0 {
        return Err(Error::NoTargets);
    }
    if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, vocab });
    }
    let inv_count = T::one() / c::<T>(count as f64);
    let mut grad = Tensor::zeros(&[seq, vocab]);
    let mut loss = T::zero();
    for (t, &target) in targets.iter().enumerate() {
        if target == ignore_index {
            continue;
        }
        let row = logits.row(t);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[target];
        let g = grad.row_mut(t);
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_count;
        }
        g[target] -= inv_count;
    }
    Ok((loss * inv_count, grad))
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
