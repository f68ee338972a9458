//! Forward and backward numeric kernels over row-major slices.
//!
//! Every reduction runs in a fixed sequential order, so a kernel called twice
//! on the same inputs returns bit-identical results.

use crate::tensor::Scalar;

/// `sqrt(2/pi)` used by the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Dot product with eight independent partial sums, combined in a fixed order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let aa = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += aa[l] * bb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `c[n,m] = a[n,k] · b[k,m]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(crow, av, &b[p * m..(p + 1) * m]);
            }
        }
    }
    c
}

/// `da[n,k] = dc[n,m] · bᵀ`.
pub fn matmul_grad_a<T: Scalar>(dc: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut da = vec![T::zero(); n * k];
    for i in 0..n {
        let dcrow = &dc[i * m..(i + 1) * m];
        for p in 0..k {
            da[i * k + p] = dot(dcrow, &b[p * m..(p + 1) * m]);
        }
    }
    da
}

/// `db[k,m] = aᵀ · dc[n,m]`.
pub fn matmul_grad_b<T: Scalar>(a: &[T], dc: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k * m];
    for i in 0..n {
        let dcrow = &dc[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(&mut db[p * m..(p + 1) * m], av, dcrow);
            }
        }
    }
    db
}

/// Row-wise layer normalization. Returns `(y, mean, rstd)`.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    cols: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let inv_n = T::one() / T::from_f64(cols as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        let out = &mut y[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_grad<T: Scalar>(
    dy: &[T],
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    cols: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let inv_n = T::one() / T::from_f64(cols as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    let mut xhat = vec![T::zero(); cols];
    let mut g = vec![T::zero(); cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        for j in 0..cols {
            xhat[j] = (row[j] - mean[r]) * rstd[r];
            g[j] = dyr[j] * gamma[j];
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
        }
        let mean_g = g.iter().copied().sum::<T>() * inv_n;
        let mean_gx = g.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        let out = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out[j] = rstd[r] * (g[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    (dx, dgamma, dbeta)
}

/// In-place numerically stable softmax. Entries equal to `-inf` get exactly 0.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Geometry of a multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    /// Number of queries.
    pub n: usize,
    /// Number of keys / values.
    pub m: usize,
    /// Model width (all heads).
    pub d: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// `softmax(q kᵀ / sqrt(dh)) v` per head. Returns `(out[n,d], probs[heads,n,m])`.
pub fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims { n, m, d, heads, causal } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let prow = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            for j in 0..m {
                prow[j] = if causal && j > i {
                    T::neg_infinity()
                } else {
                    dot(qi, &k[j * d + off..j * d + off + dh]) * scale
                };
            }
            softmax_in_place(prow);
            let oi = &mut out[i * d + off..i * d + off + dh];
            for j in 0..m {
                let p = prow[j];
                if p != T::zero() {
                    axpy(oi, p, &v[j * d + off..j * d + off + dh]);
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_grad<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { n, m, d, heads, .. } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); m * d];
    let mut dv = vec![T::zero(); m * d];
    let mut dp = vec![T::zero(); m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let prow = &probs[(h * n + i) * m..(h * n + i + 1) * m];
            let doi = &dout[i * d + off..i * d + off + dh];
            let mut weighted = T::zero();
            for j in 0..m {
                if prow[j] != T::zero() {
                    axpy(&mut dv[j * d + off..j * d + off + dh], prow[j], doi);
                    dp[j] = dot(doi, &v[j * d + off..j * d + off + dh]);
                    weighted += prow[j] * dp[j];
                } else {
                    dp[j] = T::zero();
                }
            }
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..m {
                if prow[j] == T::zero() {
                    continue;
                }
                let ds = prow[j] * (dp[j] - weighted) * scale;
                axpy(&mut dq[i * d + off..i * d + off + dh], ds, &k[j * d + off..j * d + off + dh]);
                axpy(&mut dk[j * d + off..j * d + off + dh], ds, qi);
            }
        }
    }
    (dq, dk, dv)
}

/// Mean negative log-likelihood over rows with `mask[i] == true`.
/// Returns `(loss, probs, count)`; `count == 0` means the mask selected nothing.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    mask: &[bool],
) -> (T, Vec<T>, usize) {
    let rows = targets.len();
    let mut probs = vec![T::zero(); rows * vocab];
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..rows {
        if !mask[i] {
            continue;
        }
        let prow = &mut probs[i * vocab..(i + 1) * vocab];
        prow.copy_from_slice(&logits[i * vocab..(i + 1) * vocab]);
        let max = prow.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for p in prow.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        let log_z = sum.ln() + max;
        total += log_z - logits[i * vocab + targets[i]];
        let inv = T::one() / sum;
        for p in prow.iter_mut() {
            *p = *p * inv;
        }
        count += 1;
    }
    let loss = if count == 0 { T::zero() } else { total / T::from_f64(count as f64) };
    (loss, probs, count)
}
