//! Plain forward kernels shared by the tape and the incremental decoder.
//!
//! Both paths call the same routines so that step-by-step decoding performs
//! the same arithmetic as a full forward pass.

use super::Real;

pub const RMS_EPS: f64 = 1e-6;

/// `C[m,n] = A[m,k] B[k,n]`, all row-major.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert!(a.len() >= m * k && b.len() >= k * n, "matmul extents");
    let mut c = vec![T::zero(); m * n];
    if m * n == 0 {
        return c;
    }
    T::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, T::zero(), &mut c, n as isize, 1);
    c
}

/// `C[k,n] += A[m,k]^T B[m,n]`.
pub fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n, "matmul_at_b extents");
    if k * n == 0 {
        return;
    }
    T::gemm(k, m, n, a, 1, k as isize, b, n as isize, 1, T::one(), c, n as isize, 1);
}

/// `C[m,k] = A[m,n] B[k,n]^T`.
pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    assert!(a.len() >= m * n && b.len() >= k * n, "matmul_a_bt extents");
    let mut c = vec![T::zero(); m * k];
    if m * k == 0 {
        return c;
    }
    T::gemm(m, n, k, a, n as isize, 1, b, 1, n as isize, T::zero(), &mut c, k as isize, 1);
    c
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of SiLU.
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// RMS-normalize one row in groups of `group` channels, scaling each group
/// by `scale[0..group]`. Returns the inverse RMS of every group.
pub fn rms_norm_row<T: Real>(x: &[T], scale: &[T], group: usize, out: &mut [T], inv: &mut [T]) {
    let eps = T::from_f64(RMS_EPS);
    let g_n = T::from_f64(group as f64);
    for (gi, (xs, os)) in x.chunks(group).zip(out.chunks_mut(group)).enumerate() {
        let ms = xs.iter().map(|&v| v * v).sum::<T>() / g_n;
        let r = T::one() / (ms + eps).sqrt();
        inv[gi] = r;
        for ((o, &v), &s) in os.iter_mut().zip(xs).zip(scale) {
            *o = v * r * s;
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Rotate interleaved pairs `(2j, 2j+1)` of every head by the angles whose
/// cosines and sines are given (one per pair).
pub fn rope_row<T: Real>(x: &mut [T], head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    for head in x.chunks_mut(head_dim) {
        for (j, pair) in head.chunks_mut(2).enumerate() {
            let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}

/// Per-position rotation angles, stored as cosines and sines with `pairs`
/// entries per position.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeAngles<T> {
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Real> RopeAngles<T> {
    /// Build from one row of angles (radians) per position.
    pub fn from_angles(angles: &[Vec<f64>]) -> Self {
        let pairs = angles.first().map_or(0, Vec::len);
        let mut cos = Vec::with_capacity(pairs * angles.len());
        let mut sin = Vec::with_capacity(pairs * angles.len());
        for row in angles {
            assert_eq!(row.len(), pairs, "ragged angle table");
            cos.extend(row.iter().map(|a| T::from_f64(a.cos())));
            sin.extend(row.iter().map(|a| T::from_f64(a.sin())));
        }
        RopeAngles { pairs, cos, sin }
    }

    pub fn positions(&self) -> usize {
        if self.pairs == 0 {
            0
        } else {
            self.cos.len() / self.pairs
        }
    }

    pub fn apply(&self, x: &mut [T], head_dim: usize, pos: usize, inverse: bool) {
        let r = pos * self.pairs..(pos + 1) * self.pairs;
        rope_row(x, head_dim, &self.cos[r.clone()], &self.sin[r], inverse);
    }
}

/// Causal multi-head attention for the query at position `i`, attending over
/// `keys`/`values` rows `0..=i` (row stride `d`). Writes per-head
/// probabilities into `probs[head * (i+1) ..]` and the output row into `out`.
pub fn attention_row<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    i: usize,
    heads: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let d = q.len();
    let hd = d / heads;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let n = i + 1;
    for h in 0..heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * n..(h + 1) * n];
        for (j, pj) in p.iter_mut().enumerate() {
            let kj = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            *pj = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
        }
        softmax_in_place(p);
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.iter_mut().for_each(|o| *o = T::zero());
        for (j, &pj) in p.iter().enumerate() {
            let vj = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vj) {
                *o += pj * v;
            }
        }
    }
}

/// One output row of a depthwise causal convolution. `window[j]` is the
/// input row at offset `j - (K-1)` from the current position, `None` when
/// that position precedes the sequence start. `w` is `[channels, K]`.
pub fn causal_conv_row<T: Real>(w: &[T], kernel: usize, window: &[Option<&[T]>], out: &mut [T]) {
    for (ch, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (j, row) in window.iter().enumerate() {
            if let Some(row) = row {
                acc += w[ch * kernel + j] * row[ch];
            }
        }
        *o = acc;
    }
}
