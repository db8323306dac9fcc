use rand::Rng;

use crate::attention::{EdgeLayerParams, EdgeState, PivotMask};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::embed::{self, Embeddings, GraphInput, Padded};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoder-only edge transformer with a per-edge classification head.
#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embeddings: Embeddings,
    /// One entry when tied, `num_layers` otherwise.
    pub layers: Vec<EdgeLayerParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let embeddings = Embeddings::init(&mut store, &config, rng)?;
        let layers = embed::init_layers(&mut store, &config, "enc", rng)?;
        let head_w = store.insert("head.w", config.init.matrix(config.d, config.num_output_labels, rng))?;
        let head_b = store.insert("head.b", Tensor::zeros(&[config.num_output_labels]))?;
        Ok(EncoderModel { config, store, embeddings, layers, head_w, head_b })
    }

    pub fn graph_init(&self, g: &mut Graph<T>, graphs: &[GraphInput]) -> Result<Padded> {
        let table = self
            .embeddings
            .edge_label
            .ok_or_else(|| Error::Config("model has no edge-label table (model.num_edge_labels = 0)".into()))?;
        embed::graph_init(g, &self.store, table, graphs)
    }

    pub fn sequence_init(&self, g: &mut Graph<T>, seqs: &[&[usize]]) -> Result<Padded> {
        match (self.embeddings.token, self.embeddings.rel) {
            (Some(tok), Some(rel)) => {
                if let Some(s) = seqs.iter().find(|s| s.len() > self.config.max_len) {
                    return Err(Error::Capacity(format!("sequence of {} exceeds model.max_len {}", s.len(), self.config.max_len)));
                }
                embed::sequence_init(g, &self.store, tok, rel, seqs)
            }
            _ => Err(Error::Config("model has no token table (model.vocab_size = 0)".into())),
        }
    }

    /// Runs the layer stack under `mask`, zeroing rows not flagged in `keep`.
    pub fn encode(&self, g: &mut Graph<T>, x0: EdgeState, mask: &PivotMask, keep: Option<&[bool]>) -> Result<EdgeState> {
        embed::run_stack(g, &self.store, &self.config, &self.layers, x0, mask, keep)
    }

    pub fn encode_padded(&self, g: &mut Graph<T>, x0: &Padded) -> Result<EdgeState> {
        let keep = x0.keep();
        self.encode(g, x0.state, &x0.mask(), Some(&keep))
    }

    /// Logits `(batch, num_output_labels)` read from edge `queries[b]` of each element.
    pub fn classify_query_edge(&self, g: &mut Graph<T>, x: &EdgeState, queries: &[(usize, usize)]) -> Result<Var> {
        if queries.len() != x.batch {
            return Err(Error::shape(format!("{} queries for a batch of {}", queries.len(), x.batch)));
        }
        let n = x.n;
        let mut rows = Vec::with_capacity(queries.len());
        for (b, &(i, j)) in queries.iter().enumerate() {
            if i >= n || j >= n {
                return Err(Error::index(format!("query edge ({i}, {j}) with {n} nodes")));
            }
            rows.push(Some((b * n + i) * n + j));
        }
        let flat = g.reshape(x.x, &[x.batch * n * n, x.d])?;
        let picked = g.gather(flat, &rows)?;
        let (w, b) = (g.param(&self.store, self.head_w), g.param(&self.store, self.head_b));
        g.linear(picked, w, Some(b))
    }

    /// Full relation-classification forward pass over a padded batch.
    pub fn relation_logits(&self, g: &mut Graph<T>, graphs: &[GraphInput], queries: &[(usize, usize)]) -> Result<Var> {
        for (graph, &(i, j)) in graphs.iter().zip(queries) {
            if i >= graph.n || j >= graph.n {
                return Err(Error::index(format!("query edge ({i}, {j}) with {} nodes", graph.n)));
            }
        }
        let x0 = self.graph_init(g, graphs)?;
        let x = self.encode_padded(g, &x0)?;
        self.classify_query_edge(g, &x, queries)
    }
}
