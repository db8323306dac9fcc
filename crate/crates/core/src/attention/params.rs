use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Projections of one attention head; every matrix is `(d, d_head)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv1: ParamId,
    pub bv1: ParamId,
    pub wv2: ParamId,
    pub bv2: ParamId,
}

/// All heads plus the `(d, d)` output projection applied to their concatenation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriAttnParams {
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// One edge-transformer layer: attention, two layer norms and a `d -> 4d -> d`
/// feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeLayerParams {
    pub attn: TriAttnParams,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Weight initialization. `Glorot` draws every matrix and embedding table from
/// `U(±sqrt(6 / (fan_in + fan_out)))`; `FanIn` draws matrices from
/// `U(±1 / sqrt(fan_in))` and embedding rows from `N(0, 1)`. Biases are zero
/// and layer-norm gains one under both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Init {
    Glorot,
    #[default]
    FanIn,
}

impl Init {
    pub const ALL: [Init; 2] = [Init::Glorot, Init::FanIn];

    pub fn as_str(self) -> &'static str {
        match self {
            Init::Glorot => "glorot",
            Init::FanIn => "fan_in",
        }
    }

    /// A `(fan_in, fan_out)` weight matrix.
    pub fn matrix<T: Scalar, R: Rng + ?Sized>(self, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::Glorot => Tensor::xavier_uniform(fan_in, fan_out, rng),
            Init::FanIn => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.gen_range(-bound..bound)))
            }
        }
    }

    /// A `(rows, d)` embedding table.
    pub fn table<T: Scalar, R: Rng + ?Sized>(self, rows: usize, d: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::Glorot => Tensor::xavier_uniform(rows, d, rng),
            Init::FanIn => Tensor::from_fn(&[rows, d], |_| T::of(rng.sample(StandardNormal))),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Init::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown init scheme {s:?} (glorot, fan_in)")))
    }
}

/// Hidden width of the feed-forward block relative to the model width.
pub const FFN_MULT: usize = 4;

pub(crate) fn matrix<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
    rng: &mut R,
) -> Result<ParamId> {
    store.insert(name, init.matrix(rows, cols, rng))
}

pub(crate) fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: String, len: usize) -> Result<ParamId> {
    store.insert(name, Tensor::zeros(&[len]))
}

pub(crate) fn ones<T: Scalar>(store: &mut ParamStore<T>, name: String, len: usize) -> Result<ParamId> {
    store.insert(name, Tensor::ones(&[len]))
}

pub fn head_width(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} is not divisible into {heads} heads")));
    }
    Ok(d / heads)
}

impl HeadParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        d_head: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(HeadParams {
            wq: matrix(store, format!("{prefix}.wq"), d, d_head, init, rng)?,
            bq: zeros(store, format!("{prefix}.bq"), d_head)?,
            wk: matrix(store, format!("{prefix}.wk"), d, d_head, init, rng)?,
            bk: zeros(store, format!("{prefix}.bk"), d_head)?,
            wv1: matrix(store, format!("{prefix}.wv1"), d, d_head, init, rng)?,
            bv1: zeros(store, format!("{prefix}.bv1"), d_head)?,
            wv2: matrix(store, format!("{prefix}.wv2"), d, d_head, init, rng)?,
            bv2: zeros(store, format!("{prefix}.bv2"), d_head)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [self.wq, self.bq, self.wk, self.bk, self.wv1, self.bv1, self.wv2, self.bv2]
    }
}

impl TriAttnParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let d_head = head_width(d, heads)?;
        let heads = (0..heads)
            .map(|h| HeadParams::init(store, &format!("{prefix}.head{h}"), d, d_head, init, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TriAttnParams {
            heads,
            wo: matrix(store, format!("{prefix}.wo"), d, d, init, rng)?,
            bo: zeros(store, format!("{prefix}.bo"), d)?,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

impl EdgeLayerParams {
    /// Registers a freshly initialized layer under `prefix` (e.g. `enc.layer0`).
    ///
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = FFN_MULT * d;
        Ok(EdgeLayerParams {
            attn: TriAttnParams::init(store, &format!("{prefix}.attn"), d, heads, init, rng)?,
            ffn_w1: matrix(store, format!("{prefix}.ffn.w1"), d, hidden, init, rng)?,
            ffn_b1: zeros(store, format!("{prefix}.ffn.b1"), hidden)?,
            ffn_w2: matrix(store, format!("{prefix}.ffn.w2"), hidden, d, init, rng)?,
            ffn_b2: zeros(store, format!("{prefix}.ffn.b2"), d)?,
            ln1_gain: ones(store, format!("{prefix}.ln1.gain"), d)?,
            ln1_bias: zeros(store, format!("{prefix}.ln1.bias"), d)?,
            ln2_gain: ones(store, format!("{prefix}.ln2.gain"), d)?,
            ln2_bias: zeros(store, format!("{prefix}.ln2.bias"), d)?,
        })
    }
}
