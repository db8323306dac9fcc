//! Direct loop transcription of triangular attention and the edge layer.
//!
//! Works on plain `f64` buffers for a single batch element with no use of the
//! graph, einsum or GEMM code paths, so it can serve as an oracle for them.

use crate::attention::{AblationMode, EdgeLayerParams, HeadParams, PivotMask};
use crate::autodiff::{ParamId, ParamStore, LAYER_NORM_EPS};
use crate::scalar::Scalar;

/// A dense row-major matrix copied out of a parameter store.
#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn load<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> Self {
        let v = store.value(id);
        let (rows, cols) = match v.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => panic!("reference oracle expects matrices or vectors, got {s:?}"),
        };
        Mat { rows, cols, data: v.data().iter().map(|x| x.as_f64()).collect() }
    }

    /// `x W + b` for a row vector `x`.
    pub fn affine(&self, x: &[f64], bias: &Mat) -> Vec<f64> {
        (0..self.cols)
            .map(|c| {
                let mut s = bias.data[c];
                for (e, &xe) in x.iter().enumerate() {
                    s += xe * self.data[e * self.cols + c];
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RefHead {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv1: Mat,
    pub bv1: Mat,
    pub wv2: Mat,
    pub bv2: Mat,
}

impl RefHead {
    pub fn load<T: Scalar>(store: &ParamStore<T>, h: &HeadParams) -> Self {
        let m = |id| Mat::load(store, id);
        RefHead {
            wq: m(h.wq),
            bq: m(h.bq),
            wk: m(h.wk),
            bk: m(h.bk),
            wv1: m(h.wv1),
            bv1: m(h.bv1),
            wv2: m(h.wv2),
            bv2: m(h.bv2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefLayer {
    pub heads: Vec<RefHead>,
    pub wo: Mat,
    pub bo: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln1: (Mat, Mat),
    pub ln2: (Mat, Mat),
}

impl RefLayer {
    pub fn load<T: Scalar>(store: &ParamStore<T>, p: &EdgeLayerParams) -> Self {
        let m = |id| Mat::load(store, id);
        RefLayer {
            heads: p.attn.heads.iter().map(|h| RefHead::load(store, h)).collect(),
            wo: m(p.attn.wo),
            bo: m(p.attn.bo),
            w1: m(p.ffn_w1),
            b1: m(p.ffn_b1),
            w2: m(p.ffn_w2),
            b2: m(p.ffn_b2),
            ln1: (m(p.ln1_gain), m(p.ln1_bias)),
            ln2: (m(p.ln2_gain), m(p.ln2_bias)),
        }
    }
}

/// Single-batch view of a pivot mask.
pub fn allowed_fn(mask: &PivotMask, b: usize) -> impl Fn(usize, usize, usize) -> bool + '_ {
    move |i, l, j| mask.allowed(b, i, l, j)
}

fn edge(x: &[f64], n: usize, d: usize, i: usize, j: usize) -> &[f64] {
    &x[(i * n + j) * d..(i * n + j + 1) * d]
}

/// One head over an `(n, n, d)` state; returns `(n, n, d_head)` attention
/// outputs and the `(n, n, n)` weights `alpha[i][j][l]`.
pub fn head(
    x: &[f64],
    n: usize,
    d: usize,
    p: &RefHead,
    allowed: &dyn Fn(usize, usize, usize) -> bool,
    mode: AblationMode,
) -> (Vec<f64>, Vec<f64>) {
    let dh = p.wq.cols;
    let mut out = vec![0.0; n * n * dh];
    let mut weights = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            let pivots: Vec<usize> = (0..n).filter(|&l| allowed(i, l, j)).collect();
            let mut scores = Vec::with_capacity(pivots.len());
            for &l in &pivots {
                let q = p.wq.affine(edge(x, n, d, i, l), &p.bq);
                let key_edge = match mode {
                    AblationMode::AttentionAblation => edge(x, n, d, i, j),
                    _ => edge(x, n, d, l, j),
                };
                let k = p.wk.affine(key_edge, &p.bk);
                let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                scores.push(dot / (dh as f64).sqrt());
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (&l, e) in pivots.iter().zip(&exps) {
                let alpha = e / z;
                weights[(i * n + j) * n + l] = alpha;
                let v1 = p.wv1.affine(edge(x, n, d, i, l), &p.bv1);
                let v: Vec<f64> = match mode {
                    AblationMode::ValueAblation => v1,
                    _ => {
                        let v2 = p.wv2.affine(edge(x, n, d, l, j), &p.bv2);
                        v1.iter().zip(&v2).map(|(a, b)| a * b).collect()
                    }
                };
                for c in 0..dh {
                    out[(i * n + j) * dh + c] += alpha * v[c];
                }
            }
        }
    }
    (out, weights)
}

/// All heads, concatenated and projected through `W^o`.
pub fn attention(
    x: &[f64],
    n: usize,
    d: usize,
    layer: &RefLayer,
    allowed: &dyn Fn(usize, usize, usize) -> bool,
    mode: AblationMode,
) -> Vec<f64> {
    let per_head: Vec<Vec<f64>> = layer.heads.iter().map(|h| head(x, n, d, h, allowed, mode).0).collect();
    let dh = layer.heads[0].wq.cols;
    let mut out = Vec::with_capacity(n * n * d);
    for e in 0..n * n {
        let cat: Vec<f64> = per_head.iter().flat_map(|h| h[e * dh..(e + 1) * dh].iter().copied()).collect();
        out.extend(layer.wo.affine(&cat, &layer.bo));
    }
    out
}

pub fn layer_norm(v: &[f64], gain: &Mat, bias: &Mat) -> Vec<f64> {
    let d = v.len() as f64;
    let mean = v.iter().sum::<f64>() / d;
    let var = v.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / d;
    let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    v.iter().enumerate().map(|(c, t)| (t - mean) * r * gain.data[c] + bias.data[c]).collect()
}

/// The full layer on one `(n, n, d)` state.
pub fn layer(
    x: &[f64],
    n: usize,
    d: usize,
    p: &RefLayer,
    allowed: &dyn Fn(usize, usize, usize) -> bool,
    mode: AblationMode,
    ffn_residual: bool,
) -> Vec<f64> {
    let normed: Vec<f64> = x.chunks(d).flat_map(|e| layer_norm(e, &p.ln1.0, &p.ln1.1)).collect();
    let a = attention(&normed, n, d, p, allowed, mode);
    let y: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
    let mut out = Vec::with_capacity(y.len());
    for e in y.chunks(d) {
        let z = layer_norm(e, &p.ln2.0, &p.ln2.1);
        let hidden: Vec<f64> = p.w1.affine(&z, &p.b1).into_iter().map(|t| t.max(0.0)).collect();
        let f = p.w2.affine(&hidden, &p.b2);
        if ffn_residual {
            out.extend(e.iter().zip(&f).map(|(u, v)| u + v));
        } else {
            out.extend(f);
        }
    }
    out
}
