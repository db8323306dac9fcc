use rand::Rng;

use crate::attention::{EdgeLayerParams, EdgeState, PivotMask};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::embed::{self, rel_row, Embeddings};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Target id used to mark padding in loss targets.
pub const IGNORE: usize = usize::MAX;

/// Encoder-decoder edge transformer.
///
/// The decoder runs on a joint state over `n_enc + n_dec` positions (encoder
/// first): the encoder block is the encoder output, decoder self-edges carry
/// target tokens plus `a(0)`, other decoder edges carry decoder-local relative
/// positions and every encoder/decoder edge starts from one learned vector.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    /// Source token and relative-position tables (no edge-label table).
    pub embeddings: Embeddings,
    pub target_tokens: ParamId,
    pub cross: ParamId,
    pub encoder: Vec<EdgeLayerParams>,
    pub decoder: Vec<EdgeLayerParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Output of [`Seq2SeqModel::greedy_decode`] for one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// The length limit was reached before `<eos>`.
    pub truncated: bool,
}

/// Encoder output for a padded batch of sources.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub state: EdgeState,
    pub real: Vec<usize>,
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

impl<T: Scalar> Seq2SeqModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.vocab_size == 0 || config.num_output_labels < 3 {
            return Err(Error::Config(
                "seq2seq needs model.vocab_size > 0 and model.num_output_labels >= 3 (content + <bos> + <eos>)".into(),
            ));
        }
        let d = config.d;
        let mut store = ParamStore::new();
        let token = embed::table(&mut store, "embed.token", config.vocab_size, d, config.init, rng)?;
        let rel = embed::table(&mut store, "embed.rel", 2 * config.rel_clip + 1, d, config.init, rng)?;
        let target_tokens = embed::table(&mut store, "embed.target", config.num_output_labels, d, config.init, rng)?;
        let cross = embed::table(&mut store, "embed.cross", 1, d, config.init, rng)?;
        let encoder = embed::init_layers(&mut store, &config, "enc", rng)?;
        let decoder = embed::init_layers(&mut store, &config, "dec", rng)?;
        let head_w = store.insert("head.w", config.init.matrix(d, config.num_output_labels, rng))?;
        let head_b = store.insert("head.b", Tensor::zeros(&[config.num_output_labels]))?;
        Ok(Seq2SeqModel {
            config,
            store,
            embeddings: Embeddings { token: Some(token), edge_label: None, rel: Some(rel) },
            target_tokens,
            cross,
            encoder,
            decoder,
            head_w,
            head_b,
        })
    }

    pub fn bos(&self) -> usize {
        self.config.num_output_labels - 2
    }

    pub fn eos(&self) -> usize {
        self.config.num_output_labels - 1
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Capacity(format!("{what} of length {len} exceeds model.max_len {}", self.config.max_len)));
        }
        Ok(())
    }

    /// Runs the encoder stack on a padded batch of sources under a full mask.
    pub fn encode_source(&self, g: &mut Graph<T>, srcs: &[&[usize]]) -> Result<EncodedSource> {
        for s in srcs {
            self.check_len("source", s.len())?;
        }
        let (tok, rel) = (self.embeddings.token.expect("seq2seq token table"), self.embeddings.rel.expect("seq2seq rel table"));
        let x0 = embed::sequence_init(g, &self.store, tok, rel, srcs)?;
        let keep = x0.keep();
        let state = embed::run_stack(g, &self.store, &self.config, &self.encoder, x0.state, &x0.mask(), Some(&keep))?;
        Ok(EncodedSource { state, real: x0.real })
    }

    /// Logits `(batch, n_dec, num_output_labels)` for decoder inputs `tgts`
    /// (each starting with `<bos>`), read from the loop edge of every decoder
    /// position. Rows past a target's length are padding.
    pub fn decode_logits(&self, g: &mut Graph<T>, enc: &EncodedSource, tgts: &[&[usize]]) -> Result<Var> {
        let batch = enc.state.batch;
        if tgts.len() != batch {
            return Err(Error::shape(format!("{} decoder inputs for {batch} sources", tgts.len())));
        }
        let vocab = self.config.num_output_labels;
        for t in tgts {
            self.check_len("decoder input", t.len())?;
            if t.is_empty() {
                return Err(Error::shape("decoder input must contain at least <bos>"));
            }
            if let Some(&tok) = t.iter().find(|&&tok| tok >= vocab) {
                return Err(Error::index(format!("target token {tok} outside a vocabulary of {vocab}")));
            }
        }
        let (ne, d) = (enc.state.n, enc.state.d);
        let nd = tgts.iter().map(|t| t.len()).max().unwrap_or(0);
        let n = ne + nd;
        let clip = self.config.rel_clip;
        let real = |b: usize, p: usize| if p < ne { p < enc.real[b] } else { p - ne < tgts[b].len() };

        let rows = batch * n * n;
        let (mut from_enc, mut from_tok, mut from_rel, mut from_cross) =
            (vec![None; rows], vec![None; rows], vec![None; rows], vec![None; rows]);
        for b in 0..batch {
            for i in 0..n {
                for j in 0..n {
                    if !(real(b, i) && real(b, j)) {
                        continue;
                    }
                    let r = (b * n + i) * n + j;
                    match (i < ne, j < ne) {
                        (true, true) => from_enc[r] = Some((b * ne + i) * ne + j),
                        (false, false) => {
                            let (p, q) = (i - ne, j - ne);
                            from_rel[r] = Some(rel_row(p, q, clip));
                            if p == q {
                                from_tok[r] = Some(tgts[b][p]);
                            }
                        }
                        _ => from_cross[r] = Some(0),
                    }
                }
            }
        }
        let enc_flat = g.reshape(enc.state.x, &[batch * ne * ne, d])?;
        let parts = [
            g.gather(enc_flat, &from_enc)?,
            {
                let t = g.param(&self.store, self.target_tokens);
                g.gather(t, &from_tok)?
            },
            {
                let t = g.param(&self.store, self.embeddings.rel.expect("seq2seq rel table"));
                g.gather(t, &from_rel)?
            },
            {
                let t = g.param(&self.store, self.cross);
                g.gather(t, &from_cross)?
            },
        ];
        let mut joint = parts[0];
        for &p in &parts[1..] {
            joint = g.add(joint, p)?;
        }
        let joint = g.reshape(joint, &[batch, n, n, d])?;

        let causal = PivotMask::causal(ne, nd);
        let mask = PivotMask::from_fn(batch, n, |b, i, l, j| real(b, l) && causal.allowed(0, i, l, j));
        let keep: Vec<bool> = (0..rows).map(|r| {
            let (b, i, j) = (r / (n * n), r / n % n, r % n);
            real(b, i) && real(b, j)
        }).collect();
        let x = EdgeState::new(g, joint)?;
        let x = embed::run_stack(g, &self.store, &self.config, &self.decoder, x, &mask, Some(&keep))?;

        let loops: Vec<Option<usize>> = (0..batch)
            .flat_map(|b| (0..nd).map(move |p| (b, p)))
            .map(|(b, p)| (p < tgts[b].len()).then(|| (b * n + ne + p) * n + ne + p))
            .collect();
        let flat = g.reshape(x.x, &[rows, d])?;
        let picked = g.gather(flat, &loops)?;
        let (w, bias) = (g.param(&self.store, self.head_w), g.param(&self.store, self.head_b));
        let logits = g.linear(picked, w, Some(bias))?;
        g.reshape(logits, &[batch, nd, vocab])
    }

    /// Encoder then decoder on one padded batch.
    pub fn forward(&self, g: &mut Graph<T>, srcs: &[&[usize]], tgts: &[&[usize]]) -> Result<Var> {
        let enc = self.encode_source(g, srcs)?;
        self.decode_logits(g, &enc, tgts)
    }

    /// Teacher-forced cross-entropy: inputs `<bos> y`, targets `y <eos>`.
    pub fn loss(&self, g: &mut Graph<T>, srcs: &[&[usize]], outputs: &[&[usize]]) -> Result<Var> {
        let inputs: Vec<Vec<usize>> = outputs.iter().map(|y| std::iter::once(self.bos()).chain(y.iter().copied()).collect()).collect();
        let refs: Vec<&[usize]> = inputs.iter().map(|v| v.as_slice()).collect();
        let logits = self.forward(g, srcs, &refs)?;
        let nd = g.shape(logits)[1];
        let mut targets = Vec::with_capacity(outputs.len() * nd);
        for y in outputs {
            targets.extend(y.iter().copied());
            targets.push(self.eos());
            targets.extend(std::iter::repeat_n(IGNORE, nd - y.len() - 1));
        }
        g.cross_entropy(logits, &targets, Some(IGNORE))
    }

    /// Greedy left-to-right decoding of a batch; each output stops at `<eos>`
    /// (excluded) or after `max_len` tokens.
    pub fn greedy_decode(&self, srcs: &[&[usize]], max_len: usize) -> Result<Vec<Decoded>> {
        if max_len == 0 {
            return Err(Error::Config("greedy_decode needs max_len >= 1".into()));
        }
        let mut g = Graph::new();
        let enc = self.encode_source(&mut g, srcs)?;
        let mut prefixes: Vec<Vec<usize>> = vec![vec![self.bos()]; srcs.len()];
        let mut done = vec![false; srcs.len()];
        let vocab = self.config.num_output_labels;
        for step in 0..max_len {
            let refs: Vec<&[usize]> = prefixes.iter().map(|p| p.as_slice()).collect();
            let logits = self.decode_logits(&mut g, &enc, &refs)?;
            let value = g.value(logits).data();
            for (b, prefix) in prefixes.iter_mut().enumerate() {
                if done[b] {
                    continue;
                }
                let row = &value[(b * (step + 1) + step) * vocab..(b * (step + 1) + step + 1) * vocab];
                let next = argmax(row);
                if next == self.eos() {
                    done[b] = true;
                } else {
                    prefix.push(next);
                }
            }
            if done.iter().all(|&x| x) {
                break;
            }
            // finished rows keep a stable length so every prefix stays aligned
            for (b, prefix) in prefixes.iter_mut().enumerate() {
                if done[b] && prefix.len() < step + 2 {
                    prefix.push(self.eos());
                }
            }
        }
        Ok(prefixes
            .into_iter()
            .zip(done)
            .map(|(p, finished)| {
                let tokens: Vec<usize> = p[1..].iter().copied().take_while(|&t| t != self.eos()).collect();
                Decoded { tokens, truncated: !finished }
            })
            .collect())
    }
}
