//! Initial edge states for graphs and token sequences.

use rand::Rng;

use crate::attention::{edge_layer, EdgeLayerParams, EdgeState, Init, PivotMask};
use crate::autodiff::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::scalar::Scalar;

/// A labeled directed graph on nodes `0..n`; edges are `(src, dst, label)`.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a> {
    pub n: usize,
    pub edges: &'a [(usize, usize, usize)],
}

/// Edge state of a batch padded to a common node count.
#[derive(Debug, Clone)]
pub struct Padded {
    pub state: EdgeState,
    /// Real node count of every batch element.
    pub real: Vec<usize>,
}

impl Padded {
    /// Pivot mask that hides padded nodes.
    pub fn mask(&self) -> PivotMask {
        PivotMask::padded(self.state.n, &self.real)
    }

    /// Per-edge flags, `true` where both endpoints are real.
    pub fn keep(&self) -> Vec<bool> {
        let n = self.state.n;
        self.real
            .iter()
            .flat_map(|&r| (0..n * n).map(move |e| e / n < r && e % n < r))
            .collect()
    }
}

/// Token, edge-label and relative-position tables; absent tables are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embeddings {
    pub token: Option<ParamId>,
    /// Row 0 is the null label; real label `l` lives in row `l + 1`.
    pub edge_label: Option<ParamId>,
    /// `2 * rel_clip + 1` rows indexed by `clip(i - j) + rel_clip`.
    pub rel: Option<ParamId>,
}

pub(crate) fn table<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    d: usize,
    init: Init,
    rng: &mut R,
) -> Result<ParamId> {
    store.insert(name, init.table(rows, d, rng))
}

impl Embeddings {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let token = match cfg.vocab_size {
            0 => None,
            v => Some(table(store, "embed.token", v, cfg.d, cfg.init, rng)?),
        };
        let edge_label = match cfg.num_edge_labels {
            0 => None,
            c => Some(table(store, "embed.edge_label", c + 1, cfg.d, cfg.init, rng)?),
        };
        let rel = match token {
            None => None,
            Some(_) => Some(table(store, "embed.rel", 2 * cfg.rel_clip + 1, cfg.d, cfg.init, rng)?),
        };
        Ok(Embeddings { token, edge_label, rel })
    }
}

/// Row of the relative-position table for offset `i - j`.
pub fn rel_row(i: usize, j: usize, clip: usize) -> usize {
    let c = clip as isize;
    ((i as isize - j as isize).clamp(-c, c) + c) as usize
}

/// `x_ij` = embedding of the label on edge `(i, j)`, or the null row when
/// there is none. Padded entries are zero.
pub fn graph_init<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    labels: ParamId,
    graphs: &[GraphInput],
) -> Result<Padded> {
    let rows = store.value(labels).shape()[0];
    let n = graphs.iter().map(|x| x.n).max().unwrap_or(0);
    if n == 0 {
        return Err(Error::shape("graph_init needs at least one node"));
    }
    let mut index = vec![None; graphs.len() * n * n];
    for (b, graph) in graphs.iter().enumerate() {
        let block = &mut index[b * n * n..(b + 1) * n * n];
        for i in 0..graph.n {
            for j in 0..graph.n {
                block[i * n + j] = Some(0);
            }
        }
        for &(src, dst, label) in graph.edges {
            if src >= graph.n || dst >= graph.n {
                return Err(Error::index(format!("edge ({src}, {dst}) in a graph of {} nodes", graph.n)));
            }
            if label + 1 >= rows {
                return Err(Error::index(format!("edge label {label} outside {} labels", rows - 1)));
            }
            let slot = &mut block[src * n + dst];
            if *slot != Some(0) {
                return Err(Error::index(format!("duplicate directed edge ({src}, {dst})")));
            }
            *slot = Some(label + 1);
        }
    }
    let table = g.param(store, labels);
    let d = g.shape(table)[1];
    let x = g.gather(table, &index)?;
    let x = g.reshape(x, &[graphs.len(), n, n, d])?;
    Ok(Padded { state: EdgeState::new(g, x)?, real: graphs.iter().map(|x| x.n).collect() })
}

/// `x_ii = e(t_i) + a(0)`, `x_ij = a(clip(i - j))`. Padded entries are zero.
pub fn sequence_init<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tokens: ParamId,
    rel: ParamId,
    seqs: &[&[usize]],
) -> Result<Padded> {
    let vocab = store.value(tokens).shape()[0];
    let clip = (store.value(rel).shape()[0] - 1) / 2;
    let n = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    if n == 0 {
        return Err(Error::shape("sequence_init needs a nonempty sequence"));
    }
    let mut tok = vec![None; seqs.len() * n * n];
    let mut pos = vec![None; seqs.len() * n * n];
    for (b, seq) in seqs.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::shape("sequence_init: empty sequence in batch"));
        }
        for (i, &t) in seq.iter().enumerate() {
            if t >= vocab {
                return Err(Error::index(format!("token {t} outside a vocabulary of {vocab}")));
            }
            tok[(b * n + i) * n + i] = Some(t);
            for j in 0..seq.len() {
                pos[(b * n + i) * n + j] = Some(rel_row(i, j, clip));
            }
        }
    }
    let (tv, rv) = (g.param(store, tokens), g.param(store, rel));
    let d = g.shape(tv)[1];
    let a = g.gather(tv, &tok)?;
    let b = g.gather(rv, &pos)?;
    let x = g.add(a, b)?;
    let x = g.reshape(x, &[seqs.len(), n, n, d])?;
    Ok(Padded { state: EdgeState::new(g, x)?, real: seqs.iter().map(|s| s.len()).collect() })
}

/// Applies `cfg.num_layers` edge layers (shared when tied), zeroing the rows
/// flagged false in `keep` after each one.
pub fn run_stack<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    layers: &[EdgeLayerParams],
    mut x: EdgeState,
    mask: &PivotMask,
    keep: Option<&[bool]>,
) -> Result<EdgeState> {
    for depth in 0..cfg.num_layers {
        let p = &layers[if cfg.tied { 0 } else { depth }];
        x = edge_layer(g, store, &x, p, mask, cfg.mode, cfg.ffn_residual)?;
        if let Some(keep) = keep {
            x.x = g.mask_rows(x.x, keep)?;
        }
    }
    Ok(x)
}

pub(crate) fn init_layers<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    rng: &mut R,
) -> Result<Vec<EdgeLayerParams>> {
    (0..cfg.num_layer_params())
        .map(|l| EdgeLayerParams::init(store, &format!("{prefix}.layer{l}"), cfg.d, cfg.heads, cfg.init, rng))
        .collect()
}
