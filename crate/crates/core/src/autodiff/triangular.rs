//! Fused triangular kernels. Value aggregation computes
//! `out[b, i, j, m, :] = sum_l alpha[b, m, i, j, l] * v1[b, i, l, m, :] * v2[b, l, j, m, :]`.
//!
//! Running it as two einsum contractions materializes an `n^3 d` intermediate;
//! the fused loops keep memory at `O(n^2 d)` and the cost at `n^3 d` multiply-adds.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents `(batch, heads, n, d_head)` read from `alpha (b, m, n, n, n)` and
/// `v1`, `v2 (b, n, n, m, h)`.
pub(crate) fn dims(alpha: &[usize], v1: &[usize], v2: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (alpha, v1) {
        (&[b, m, n, n2, n3], &[b1, n4, n5, m1, h])
            if n == n2 && n == n3 && n == n4 && n == n5 && b == b1 && m == m1 && v1 == v2 =>
        {
            Ok((b, m, n, h))
        }
        _ => Err(Error::shape(format!(
            "triangular values need alpha (b, m, n, n, n) and values (b, n, n, m, h), got {alpha:?}, {v1:?}, {v2:?}"
        ))),
    }
}

pub(crate) fn forward<T: Scalar>(alpha: &[T], v1: &[T], v2: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (batch, heads, n, h) = dims;
    let mut out = vec![T::zero(); batch * n * n * heads * h];
    let at = |b: usize, m: usize, i: usize, j: usize| ((b * heads + m) * n + i) * n * n + j * n;
    let vt = |b: usize, i: usize, j: usize, m: usize| (((b * n + i) * n + j) * heads + m) * h;
    for b in 0..batch {
        for m in 0..heads {
            for i in 0..n {
                for l in 0..n {
                    let a = &v1[vt(b, i, l, m)..][..h];
                    for j in 0..n {
                        let w = alpha[at(b, m, i, j) + l];
                        if w == T::zero() {
                            continue;
                        }
                        let c = &v2[vt(b, l, j, m)..][..h];
                        let o = &mut out[vt(b, i, j, m)..][..h];
                        for ((o, &a), &c) in o.iter_mut().zip(a).zip(c) {
                            *o += w * a * c;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to `alpha`, `v1` and `v2`.
pub(crate) fn backward<T: Scalar>(
    grad: &[T],
    alpha: &[T],
    v1: &[T],
    v2: &[T],
    dims: (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (batch, heads, n, h) = dims;
    let mut da = vec![T::zero(); alpha.len()];
    let mut dv1 = vec![T::zero(); v1.len()];
    let mut dv2 = vec![T::zero(); v2.len()];
    let at = |b: usize, m: usize, i: usize, j: usize| ((b * heads + m) * n + i) * n * n + j * n;
    let vt = |b: usize, i: usize, j: usize, m: usize| (((b * n + i) * n + j) * heads + m) * h;
    for b in 0..batch {
        for m in 0..heads {
            for i in 0..n {
                for l in 0..n {
                    let a0 = vt(b, i, l, m);
                    for j in 0..n {
                        let (ai, gi, ci) = (at(b, m, i, j) + l, vt(b, i, j, m), vt(b, l, j, m));
                        let w = alpha[ai];
                        let mut dw = T::zero();
                        for t in 0..h {
                            let (g, a, c) = (grad[gi + t], v1[a0 + t], v2[ci + t]);
                            dw += g * a * c;
                            dv1[a0 + t] += w * g * c;
                            dv2[ci + t] += w * g * a;
                        }
                        da[ai] = dw;
                    }
                }
            }
        }
    }
    (da, dv1, dv2)
}

/// Extents `(batch, heads, n, d_head)` for `q`, `k (b, n, n, m, h)`.
pub(crate) fn score_dims(q: &[usize], k: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match q {
        &[b, n, n2, m, h] if n == n2 && q == k => Ok((b, m, n, h)),
        _ => Err(Error::shape(format!("triangular scores need q and k of shape (b, n, n, m, h), got {q:?}, {k:?}"))),
    }
}

/// `scores[b, m, i, j, l] = q[b, i, l, m, :] . k[b, l, j, m, :]`.
pub(crate) fn scores<T: Scalar>(q: &[T], k: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (batch, heads, n, h) = dims;
    let mut out = vec![T::zero(); batch * heads * n * n * n];
    let vt = |b: usize, i: usize, j: usize, m: usize| (((b * n + i) * n + j) * heads + m) * h;
    for b in 0..batch {
        for m in 0..heads {
            for i in 0..n {
                let row = &mut out[((b * heads + m) * n + i) * n * n..][..n * n];
                for j in 0..n {
                    for l in 0..n {
                        let (qa, kc) = (&q[vt(b, i, l, m)..][..h], &k[vt(b, l, j, m)..][..h]);
                        row[j * n + l] = qa.iter().zip(kc).map(|(&x, &y)| x * y).sum();
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`scores`] with respect to `q` and `k`.
pub(crate) fn scores_backward<T: Scalar>(
    grad: &[T],
    q: &[T],
    k: &[T],
    dims: (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let (batch, heads, n, h) = dims;
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let vt = |b: usize, i: usize, j: usize, m: usize| (((b * n + i) * n + j) * heads + m) * h;
    for b in 0..batch {
        for m in 0..heads {
            for i in 0..n {
                let row = &grad[((b * heads + m) * n + i) * n * n..][..n * n];
                for j in 0..n {
                    for l in 0..n {
                        let g = row[j * n + l];
                        if g == T::zero() {
                            continue;
                        }
                        let (qi, ki) = (vt(b, i, l, m), vt(b, l, j, m));
                        for t in 0..h {
                            dq[qi + t] += g * k[ki + t];
                            dk[ki + t] += g * q[qi + t];
                        }
                    }
                }
            }
        }
    }
    (dq, dk)
}
