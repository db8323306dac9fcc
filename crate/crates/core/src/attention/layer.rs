//! Triangular attention and the edge-transformer layer.

use crate::attention::mask::PivotMask;
use crate::attention::params::{EdgeLayerParams, HeadParams, TriAttnParams};
use crate::attention::AblationMode;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a `(batch, n, n, d)` edge-state tensor; row `[b, i, j, :]` is `x_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeState {
    pub x: Var,
    pub batch: usize,
    pub n: usize,
    pub d: usize,
}

impl EdgeState {
    pub fn new<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Self> {
        match *g.shape(x) {
            [batch, n, n2, d] if n == n2 => Ok(EdgeState { x, batch, n, d }),
            ref s => Err(Error::shape(format!("edge state must be (batch, n, n, d), got {s:?}"))),
        }
    }

    fn with(&self, x: Var) -> Self {
        EdgeState { x, ..*self }
    }
}

/// Query, key and both value projections with the heads packed side by side.
struct Projections {
    wq: (Var, Var),
    wk: (Var, Var),
    wv1: (Var, Var),
    wv2: (Var, Var),
}

fn packed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    heads: &[HeadParams],
    pick: impl Fn(&HeadParams) -> (ParamId, ParamId),
) -> Result<(Var, Var)> {
    if let [single] = heads {
        let (w, b) = pick(single);
        return Ok((g.param(store, w), g.param(store, b)));
    }
    let ws: Vec<Var> = heads.iter().map(|h| g.param(store, pick(h).0)).collect();
    let bs: Vec<Var> = heads.iter().map(|h| g.param(store, pick(h).1)).collect();
    Ok((g.concat_last(&ws)?, g.concat_last(&bs)?))
}

fn project<T: Scalar>(g: &mut Graph<T>, x: &EdgeState, wb: (Var, Var), heads: usize) -> Result<Var> {
    let y = g.linear(x.x, wb.0, Some(wb.1))?;
    let width = g.shape(y)[3];
    g.reshape(y, &[x.batch, x.n, x.n, heads, width / heads])
}

/// Shared multi-head kernel; returns per-head outputs concatenated to
/// `(batch, n, n, heads * d_head)` and the weights `(batch, heads, i, j, l)`.
fn attend<T: Scalar>(
    g: &mut Graph<T>,
    x: &EdgeState,
    p: &Projections,
    heads: usize,
    mask: &PivotMask,
    mode: AblationMode,
) -> Result<(Var, Var)> {
    if mask.n() != x.n || (mask.batch() != 1 && mask.batch() != x.batch) {
        return Err(Error::shape(format!(
            "pivot mask (batch {}, n {}) for edge state (batch {}, n {})",
            mask.batch(),
            mask.n(),
            x.batch,
            x.n
        )));
    }
    let q = project(g, x, p.wq, heads)?;
    let k = project(g, x, p.wk, heads)?;
    let d_head = g.shape(q)[4];
    // scores[b, m, i, j, l] = q_il . k_lj  (k_ij under attention ablation)
    let scores = match mode {
        AblationMode::AttentionAblation => g.contract(q, k, "bilmh,bijmh->bmijl")?,
        _ => g.triangular_scores(q, k)?,
    };
    let scores = g.scale(scores, T::one() / T::of(d_head as f64).sqrt());
    let alpha = g.softmax_masked(scores, 4, Some(&mask.score_layout()))?;
    let v1 = project(g, x, p.wv1, heads)?;
    let out = match mode {
        AblationMode::ValueAblation => g.contract(alpha, v1, "bmijl,bilmh->bijmh")?,
        _ => {
            let v2 = project(g, x, p.wv2, heads)?;
            g.triangular_values(alpha, v1, v2)?
        }
    };
    Ok((g.reshape(out, &[x.batch, x.n, x.n, heads * d_head])?, alpha))
}

fn projections<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, heads: &[HeadParams]) -> Result<Projections> {
    Ok(Projections {
        wq: packed(g, store, heads, |h| (h.wq, h.bq))?,
        wk: packed(g, store, heads, |h| (h.wk, h.bk))?,
        wv1: packed(g, store, heads, |h| (h.wv1, h.bv1))?,
        wv2: packed(g, store, heads, |h| (h.wv2, h.bv2))?,
    })
}

/// One head of triangular attention before the output projection:
/// `sum_l softmax_l(q_il . k_lj / sqrt(d_head)) (V1 x_il * V2 x_lj)`.
pub fn triangular_attention_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &EdgeState,
    head: &HeadParams,
    mask: &PivotMask,
    mode: AblationMode,
) -> Result<Var> {
    let p = projections(g, store, std::slice::from_ref(head))?;
    Ok(attend(g, x, &p, 1, mask, mode)?.0)
}

/// Attention weights `alpha[b, m, i, j, l]` of every head.
pub fn triangular_attention_weights<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &EdgeState,
    p: &TriAttnParams,
    mask: &PivotMask,
    mode: AblationMode,
) -> Result<Var> {
    let proj = projections(g, store, &p.heads)?;
    Ok(attend(g, x, &proj, p.heads.len(), mask, mode)?.1)
}

/// Multi-head triangular attention: concatenated head outputs through `W^o`.
pub fn triangular_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &EdgeState,
    p: &TriAttnParams,
    mask: &PivotMask,
    mode: AblationMode,
) -> Result<EdgeState> {
    if p.heads.is_empty() {
        return Err(Error::Config("triangular attention needs at least one head".into()));
    }
    let proj = projections(g, store, &p.heads)?;
    let (heads, _) = attend(g, x, &proj, p.heads.len(), mask, mode)?;
    let (wo, bo) = (g.param(store, p.wo), g.param(store, p.bo));
    let out = g.linear(heads, wo, Some(bo))?;
    Ok(x.with(out))
}

/// `X' = FFN(LN2(X + A(LN1 X)))`, or `Y + FFN(LN2 Y)` with `Y = X + A(LN1 X)`
/// when `ffn_residual` is set.
pub fn edge_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &EdgeState,
    p: &EdgeLayerParams,
    mask: &PivotMask,
    mode: AblationMode,
    ffn_residual: bool,
) -> Result<EdgeState> {
    let (g1, b1) = (g.param(store, p.ln1_gain), g.param(store, p.ln1_bias));
    let normed = g.layer_norm(x.x, g1, b1)?;
    let attn = triangular_attention(g, store, &x.with(normed), &p.attn, mask, mode)?;
    let y = g.add(x.x, attn.x)?;
    let (g2, b2) = (g.param(store, p.ln2_gain), g.param(store, p.ln2_bias));
    let z = g.layer_norm(y, g2, b2)?;
    let (w1, c1) = (g.param(store, p.ffn_w1), g.param(store, p.ffn_b1));
    let (w2, c2) = (g.param(store, p.ffn_w2), g.param(store, p.ffn_b2));
    let hidden = g.linear(z, w1, Some(c1))?;
    let hidden = g.relu(hidden);
    let f = g.linear(hidden, w2, Some(c2))?;
    let out = if ffn_residual { g.add(y, f)? } else { f };
    Ok(x.with(out))
}
