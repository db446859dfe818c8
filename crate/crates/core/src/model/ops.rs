//! Row-wise building blocks and their backward passes. Activations are
//! row-major `[rows, d]` buffers.

use super::batch::Segment;
use super::float::{gemm_view, matmul, Float, View};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// `y = x · W` for `x: [rows, din]`, `W: [din, dout]`.
pub(crate) fn linear<T: Float>(x: &[T], w: &[T], rows: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * dout];
    matmul(rows, din, dout, x, false, w, false, &mut y, false);
    y
}

/// Accumulates `dx += dy · Wᵀ` and `dW += xᵀ · dy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Float>(
    dy: &[T],
    x: &[T],
    w: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    dx: &mut [T],
    dw: &mut [T],
) {
    matmul(rows, dout, din, dy, false, w, true, dx, true);
    matmul(din, rows, dout, x, true, dy, false, dw, true);
}

/// RMS norm with scale `1 + gain`. Returns the output and each row's
/// inverse RMS.
pub(crate) fn rms_norm<T: Float>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let eps = T::of(NORM_EPS);
    let inv_d = T::one() / T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let ir = T::one() / (ms + eps).sqrt();
        inv[r] = ir;
        for ((o, &v), &g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = v * ir * (T::one() + g);
        }
    }
    (y, inv)
}

pub(crate) fn rms_norm_backward<T: Float>(
    dy: &[T],
    x: &[T],
    inv: &[T],
    gain: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &ir) in inv.iter().enumerate() {
        let span = r * d..(r + 1) * d;
        let (dyr, xr) = (&dy[span.clone()], &x[span.clone()]);
        let mut dot = T::zero();
        for j in 0..d {
            let xhat = xr[j] * ir;
            dgain[j] += dyr[j] * xhat;
            dxhat[j] = dyr[j] * (T::one() + gain[j]);
            dot += dxhat[j] * xhat;
        }
        let mean = dot * inv_d;
        for (j, o) in dx[span].iter_mut().enumerate() {
            *o += ir * (dxhat[j] - xr[j] * ir * mean);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, which is much cheaper than libm's tanh.
fn fast_tanh<T: Float>(z: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

fn gelu_inner<T: Float>(u: T) -> T {
    fast_tanh(T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u))
}

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Float>(u: T) -> T {
    gelu_with_tanh(u, gelu_inner(u))
}

pub(crate) fn gelu_tanh<T: Float>(u: T) -> T {
    gelu_inner(u)
}

/// GELU given its precomputed inner tanh `t`.
pub(crate) fn gelu_with_tanh<T: Float>(u: T, t: T) -> T {
    T::of(0.5) * u * (T::one() + t)
}

/// GELU derivative given its precomputed inner tanh `t`.
pub(crate) fn gelu_grad<T: Float>(u: T, t: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * u * u)
}

pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Heads {
    pub count: usize,
    pub dim: usize,
}

impl Heads {
    fn width(&self) -> usize {
        self.count * self.dim
    }
}

fn prob_offsets(qsegs: &[Segment], ksegs: &[Segment], heads: usize) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(qsegs.len());
    let mut total = 0;
    for (qs, ks) in qsegs.iter().zip(ksegs) {
        offs.push(total);
        total += heads * qs.len * ks.len;
    }
    (offs, total)
}

/// Multi-head scaled dot-product attention where query segment `s` sees
/// only key segment `s`. With `causal`, query `i` sees keys `0..=i`.
/// Returns the concatenated head outputs and the attention weights.
pub(crate) fn attention<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    qsegs: &[Segment],
    ksegs: &[Segment],
    heads: Heads,
    causal: bool,
) -> (Vec<T>, Vec<T>) {
    let (d, dh) = (heads.width(), heads.dim);
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (offs, total) = prob_offsets(qsegs, ksegs, heads.count);
    let mut probs = vec![T::zero(); total];
    let mut ctx = vec![T::zero(); q.len()];
    for (s, (qs, ks)) in qsegs.iter().zip(ksegs).enumerate() {
        let (qn, kn) = (qs.len, ks.len);
        if qn == 0 || kn == 0 {
            continue;
        }
        for h in 0..heads.count {
            let qv = View::row_major(qs.start * d + h * dh, qn, dh, d);
            let kv = View::row_major(ks.start * d + h * dh, kn, dh, d);
            let pv = View::row_major(offs[s] + h * qn * kn, qn, kn, kn);
            gemm_view(scale, q, qv, k, kv.t(), T::zero(), &mut probs, pv);
            for i in 0..qn {
                let row = &mut probs[pv.off + i * kn..pv.off + (i + 1) * kn];
                let visible = if causal { (i + 1).min(kn) } else { kn };
                let (live, masked) = row.split_at_mut(visible);
                masked.iter_mut().for_each(|p| *p = T::zero());
                let max = live.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for p in live.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                let inv = T::one() / sum;
                live.iter_mut().for_each(|p| *p *= inv);
            }
            gemm_view(T::one(), &probs, pv, v, kv, T::zero(), &mut ctx, qv);
        }
    }
    (ctx, probs)
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Float>(
    dctx: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    qsegs: &[Segment],
    ksegs: &[Segment],
    heads: Heads,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (d, dh) = (heads.width(), heads.dim);
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (offs, _) = prob_offsets(qsegs, ksegs, heads.count);
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = Vec::new();
    for (s, (qs, ks)) in qsegs.iter().zip(ksegs).enumerate() {
        let (qn, kn) = (qs.len, ks.len);
        if qn == 0 || kn == 0 {
            continue;
        }
        ds.resize(qn * kn, T::zero());
        let sv = View::row_major(0, qn, kn, kn);
        for h in 0..heads.count {
            let qv = View::row_major(qs.start * d + h * dh, qn, dh, d);
            let kv = View::row_major(ks.start * d + h * dh, kn, dh, d);
            let pv = View::row_major(offs[s] + h * qn * kn, qn, kn, kn);
            gemm_view(T::one(), dctx, qv, v, kv.t(), T::zero(), &mut ds, sv);
            gemm_view(T::one(), probs, pv.t(), dctx, qv, T::one(), &mut dv, kv);
            // Masked weights are zero, so they drop out of the softmax
            // backward without a separate causal check.
            for i in 0..qn {
                let p = &probs[pv.off + i * kn..pv.off + (i + 1) * kn];
                let row = &mut ds[i * kn..(i + 1) * kn];
                let mean = dot(row, p);
                for (g, &pj) in row.iter_mut().zip(p) {
                    *g = pj * (*g - mean) * scale;
                }
            }
            gemm_view(T::one(), &ds, sv, k, kv, T::one(), &mut dq, qv);
            gemm_view(T::one(), &ds, sv.t(), q, qv, T::one(), &mut dk, kv);
        }
    }
    (dq, dk, dv)
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<T: Float>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_sum_exp<T: Float>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}
