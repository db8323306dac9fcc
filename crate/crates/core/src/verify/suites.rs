//! Oracle-equivalence, gradient and invariant suites shared by the test
//! targets and the `selftest` / `gradcheck` subcommands.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    triangular_attention, triangular_attention_head, triangular_attention_weights, AblationMode, EdgeLayerParams,
    EdgeState, Init, PivotMask,
};
use crate::autodiff::gradcheck::DEFAULT_STEP;
use crate::autodiff::{grad_check, Graph, ParamStore};
use crate::error::Result;
use crate::model::{EncoderModel, GraphInput, ModelConfig, Seq2SeqModel};
use crate::scalar::Scalar;
use crate::tasks::{gen_relation_instance, CompositionTable};
use crate::tensor::Tensor;
use crate::train::{evaluate, Learner};
use crate::verify::reference::{self, RefHead, RefLayer};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or other figure of merit).
    pub value: f64,
    pub detail: String,
}

impl CheckResult {
    fn within(name: &str, value: f64, tol: f64, detail: String) -> Self {
        CheckResult { name: name.into(), passed: value <= tol, value, detail }
    }

    fn exact(name: &str, ok: bool, detail: String) -> Self {
        CheckResult { name: name.into(), passed: ok, value: if ok { 0.0 } else { 1.0 }, detail }
    }
}

/// `|a - b| / max(1, |a|, |b|)`, the error measure used throughout.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn max_rel_error<T: Scalar>(got: &[T], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(g, w)| rel_error(g.as_f64(), *w)).fold(0.0, f64::max)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every vector parameter (biases, gains) with random values so no
/// term of the computation is trivially zero or one.
pub fn randomize_vectors<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) {
    for p in store.iter_mut() {
        if p.value.rank() == 1 {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-0.5..0.5) + 0.25));
        }
    }
}

fn random_state<T: Scalar>(g: &mut Graph<T>, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<EdgeState> {
    let v = g.input(Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0))));
    EdgeState::new(g, v)
}

/// Triangular attention (one head, several heads; every ablation mode) against
/// the loop oracle for all `n <= 5`, `d` in {2, 4, 8}, `m` in {1, 2}, with
/// full and random masks.
pub fn oracle_equivalence(seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=5 {
        for d in [2, 4, 8] {
            for m in [1, 2] {
                for mode in AblationMode::ALL {
                    for masked in [false, true] {
                        let mut store = ParamStore::<f64>::new();
                        let layer = EdgeLayerParams::init(&mut store, "layer", d, m, Init::default(), &mut r)?;
                        randomize_vectors(&mut store, &mut r);
                        let mask = if masked {
                            PivotMask::from_fn(1, n, |_, i, l, j| l == (i + 2 * j) % n || r.gen_bool(0.6))
                        } else {
                            PivotMask::full(n)
                        };
                        let mut g = Graph::new();
                        let x = random_state(&mut g, &[1, n, n, d], &mut r)?;
                        let xs = g.value(x.x).data().to_vec();
                        let allowed = reference::allowed_fn(&mask, 0);
                        let out = triangular_attention(&mut g, &store, &x, &layer.attn, &mask, mode)?;
                        let want = reference::attention(&xs, n, d, &RefLayer::load(&store, &layer), &allowed, mode);
                        worst = worst.max(max_rel_error(g.value(out.x).data(), &want));
                        for h in &layer.attn.heads {
                            let got = triangular_attention_head(&mut g, &store, &x, h, &mask, mode)?;
                            let (want, _) = reference::head(&xs, n, d, &RefHead::load(&store, h), &allowed, mode);
                            worst = worst.max(max_rel_error(g.value(got).data(), &want));
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(CheckResult::within(
        "oracle_equivalence",
        worst,
        1e-12,
        format!("{cases} configurations, max relative error {worst:.3e}"),
    ))
}

fn tiny_config(tied: bool, ffn_residual: bool, mode: AblationMode) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d: 4,
        heads: 2,
        tied,
        mode,
        ffn_residual,
        vocab_size: 5,
        num_edge_labels: 3,
        num_output_labels: 5,
        rel_clip: 2,
        max_len: 4,
        ..ModelConfig::default()
    }
}

/// Graphs of 3 and 4 nodes batched together (so padding is exercised).
fn tiny_graphs() -> (Vec<Vec<(usize, usize, usize)>>, Vec<usize>, Vec<(usize, usize)>, Vec<usize>) {
    let edges = vec![vec![(2, 0, 1), (0, 1, 2)], vec![(3, 1, 0), (1, 2, 2), (2, 0, 1)]];
    (edges, vec![3, 4], vec![(2, 1), (3, 0)], vec![4, 1])
}

/// Finite-difference check of both full models in `f64` (`n <= 4`, `d = 4`,
/// `L = 2`) over tied/untied, both FFN residual settings and, for the
/// encoder, every ablation mode.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut r = rng(seed);
    for tied in [true, false] {
        for ffn_residual in [false, true] {
            for mode in AblationMode::ALL {
                let mut model = EncoderModel::<f64>::new(tiny_config(tied, ffn_residual, mode), &mut r)?;
                randomize_vectors(&mut model.store, &mut r);
                let (edges, sizes, queries, targets) = tiny_graphs();
                let template = model.clone();
                let report = grad_check(
                    &mut model.store,
                    |g, s| {
                        let mut m = template.clone();
                        m.store = s.clone();
                        let graphs: Vec<GraphInput> = edges.iter().zip(&sizes).map(|(e, &n)| GraphInput { n, edges: e }).collect();
                        let logits = m.relation_logits(g, &graphs, &queries)?;
                        g.cross_entropy(logits, &targets, None)
                    },
                    DEFAULT_STEP,
                )?;
                let name = format!("gradcheck_encoder_tied={tied}_ffn_residual={ffn_residual}_{mode}");
                let detail = format!("{} entries, worst at {:?}", report.entries_checked, report.worst);
                out.push(CheckResult::within(&name, report.max_rel_error, 1e-4, detail));
            }
            let mut model = Seq2SeqModel::<f64>::new(tiny_config(tied, ffn_residual, AblationMode::Base), &mut r)?;
            randomize_vectors(&mut model.store, &mut r);
            let template = model.clone();
            let srcs: [&[usize]; 2] = [&[1, 4], &[3]];
            let tgts: [&[usize]; 2] = [&[2], &[0]];
            let report = grad_check(
                &mut model.store,
                |g, s| {
                    let mut m = template.clone();
                    m.store = s.clone();
                    m.loss(g, &srcs, &tgts)
                },
                DEFAULT_STEP,
            )?;
            let name = format!("gradcheck_seq2seq_tied={tied}_ffn_residual={ffn_residual}");
            let detail = format!("{} entries, worst at {:?}", report.entries_checked, report.worst);
            out.push(CheckResult::within(&name, report.max_rel_error, 1e-4, detail));
        }
    }
    Ok(out)
}

fn attention_normalization(seed: u64) -> Result<(CheckResult, CheckResult)> {
    let mut r = rng(seed);
    let (mut worst, mut masked_ok, mut slices) = (0.0f64, true, 0);
    for n in [2, 4, 6] {
        for mode in AblationMode::ALL {
            let mut store = ParamStore::<f64>::new();
            let layer = EdgeLayerParams::init(&mut store, "layer", 8, 2, Init::default(), &mut r)?;
            randomize_vectors(&mut store, &mut r);
            let ne = n / 2;
            let mask = PivotMask::causal(ne, n - ne).intersect(&PivotMask::padded(n, &[n, n - 1]))?;
            let mut g = Graph::new();
            let x = random_state(&mut g, &[2, n, n, 8], &mut r)?;
            let alpha = triangular_attention_weights(&mut g, &store, &x, &layer.attn, &mask, mode)?;
            let a = g.value(alpha);
            for b in 0..2 {
                for m in 0..2 {
                    for i in 0..n {
                        for j in 0..n {
                            let mut total = 0.0;
                            for l in 0..n {
                                let w = a.get(&[b, m, i, j, l]);
                                if !mask.allowed(b, i, l, j) && w != 0.0 {
                                    masked_ok = false;
                                }
                                total += w;
                            }
                            worst = worst.max((total - 1.0).abs());
                            slices += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((
        CheckResult::within("attention_normalization", worst, 1e-12, format!("{slices} slices, max |sum - 1| = {worst:.3e}")),
        CheckResult::exact("masked_attention_exact_zero", masked_ok, format!("{slices} slices under causal and padding masks")),
    ))
}

fn relation_batch(table: &CompositionTable, ks: &[usize], seed: u64) -> Result<Vec<crate::tasks::RelationInstance>> {
    let mut r = rng(seed);
    ks.iter().map(|&k| gen_relation_instance(table, k, &mut r)).collect()
}

fn small_encoder<T: Scalar>(seed: u64, tied: bool, layers: usize) -> Result<EncoderModel<T>> {
    let cfg = ModelConfig { num_layers: layers, d: 8, heads: 2, tied, ffn_residual: true, ..ModelConfig::default() };
    let mut r = rng(seed);
    let mut m = EncoderModel::new(cfg, &mut r)?;
    randomize_vectors(&mut m.store, &mut r);
    Ok(m)
}

fn small_seq2seq<T: Scalar>(seed: u64) -> Result<Seq2SeqModel<T>> {
    let cfg = ModelConfig {
        num_layers: 2,
        d: 8,
        heads: 2,
        tied: false,
        vocab_size: 6,
        num_edge_labels: 0,
        num_output_labels: 8,
        max_len: 8,
        ..ModelConfig::default()
    };
    let mut r = rng(seed);
    let mut m = Seq2SeqModel::new(cfg, &mut r)?;
    randomize_vectors(&mut m.store, &mut r);
    Ok(m)
}

fn permutation_equivariance(seed: u64) -> Result<CheckResult> {
    let model = small_encoder::<f32>(seed, false, 2)?;
    let table = CompositionTable::cyclic(5);
    let mut worst: f64 = 0.0;
    let mut r = rng(seed + 1);
    for x in relation_batch(&table, &[2, 3, 4, 5, 6], seed)? {
        let mut perm: Vec<usize> = (0..x.n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let moved: Vec<_> = x.edges.iter().map(|&(s, d, l)| (perm[s], perm[d], l)).collect();
        let mut g = Graph::new();
        let a = model.graph_init(&mut g, &[x.graph()])?;
        let b = model.graph_init(&mut g, &[GraphInput { n: x.n, edges: &moved }])?;
        let ya = model.encode_padded(&mut g, &a)?;
        let yb = model.encode_padded(&mut g, &b)?;
        let (va, vb) = (g.value(ya.x).clone(), g.value(yb.x).clone());
        for i in 0..x.n {
            for j in 0..x.n {
                for c in 0..8 {
                    let diff = (va.get(&[0, i, j, c]) - vb.get(&[0, perm[i], perm[j], c])).abs() as f64;
                    worst = worst.max(diff);
                }
            }
        }
    }
    Ok(CheckResult::within("permutation_equivariance_f32", worst, 1e-5, format!("max abs deviation {worst:.3e}")))
}

fn padding_neutrality(seed: u64) -> Result<CheckResult> {
    let model = small_encoder::<f32>(seed, true, 3)?;
    let table = CompositionTable::cyclic(5);
    let items = relation_batch(&table, &[2, 5, 3, 6, 4], seed)?;
    let mut worst: f64 = 0.0;
    let batch_logits = {
        let mut g = Graph::new();
        let graphs: Vec<GraphInput> = items.iter().map(|x| x.graph()).collect();
        let queries: Vec<_> = items.iter().map(|x| x.query).collect();
        let l = model.relation_logits(&mut g, &graphs, &queries)?;
        g.value(l).clone()
    };
    for (b, x) in items.iter().enumerate() {
        let mut g = Graph::new();
        let l = model.relation_logits(&mut g, &[x.graph()], &[x.query])?;
        for (c, &v) in g.value(l).data().iter().enumerate() {
            worst = worst.max((v - batch_logits.get(&[b, c])).abs() as f64);
        }
    }
    let s2s = small_seq2seq::<f32>(seed)?;
    let srcs: Vec<Vec<usize>> = vec![vec![1, 2, 3], vec![5], vec![0, 4, 4, 2, 1, 3]];
    let tgts: Vec<Vec<usize>> = vec![vec![6, 3], vec![6, 1, 2, 0, 5], vec![6]];
    let src_refs: Vec<&[usize]> = srcs.iter().map(|v| v.as_slice()).collect();
    let tgt_refs: Vec<&[usize]> = tgts.iter().map(|v| v.as_slice()).collect();
    let mut g = Graph::new();
    let all = s2s.forward(&mut g, &src_refs, &tgt_refs)?;
    let all = g.value(all).clone();
    for b in 0..srcs.len() {
        let mut g = Graph::new();
        let one = s2s.forward(&mut g, &[&srcs[b]], &[&tgts[b]])?;
        for p in 0..tgts[b].len() {
            for c in 0..8 {
                worst = worst.max((g.value(one).get(&[0, p, c]) - all.get(&[b, p, c])).abs() as f64);
            }
        }
    }
    Ok(CheckResult::within("padding_neutrality_f32", worst, 1e-5, format!("encoder and seq2seq logits, max abs deviation {worst:.3e}")))
}

fn causal_invariance(seed: u64) -> Result<CheckResult> {
    let model = small_seq2seq::<f64>(seed)?;
    let mut r = rng(seed + 7);
    let mut ok = true;
    let mut checked = 0;
    for _ in 0..20 {
        let src: Vec<usize> = (0..r.gen_range(1..=5)).map(|_| r.gen_range(0..6)).collect();
        let len = r.gen_range(1..=6);
        let mut tgt: Vec<usize> = std::iter::once(6).chain((1..len).map(|_| r.gen_range(0..8))).collect();
        let mut g = Graph::new();
        let base = model.forward(&mut g, &[&src], &[&tgt])?;
        let base = g.value(base).clone();
        let p = r.gen_range(0..len);
        for q in p + 1..len {
            tgt[q] = r.gen_range(0..8);
        }
        let mut g = Graph::new();
        let edited = model.forward(&mut g, &[&src], &[&tgt])?;
        let edited = g.value(edited);
        for pos in 0..=p {
            for c in 0..8 {
                ok &= base.get(&[0, pos, c]).to_bits() == edited.get(&[0, pos, c]).to_bits();
                checked += 1;
            }
        }
    }
    Ok(CheckResult::exact("causal_invariance_exact", ok, format!("{checked} logits compared bitwise after editing future tokens")))
}

fn tied_equals_untied(seed: u64) -> Result<CheckResult> {
    let tied = small_encoder::<f32>(seed, true, 1)?;
    let mut untied = tied.clone();
    untied.config.tied = false;
    let table = CompositionTable::cyclic(5);
    let items = relation_batch(&table, &[2, 3, 4], seed)?;
    let graphs: Vec<GraphInput> = items.iter().map(|x| x.graph()).collect();
    let queries: Vec<_> = items.iter().map(|x| x.query).collect();
    let run = |m: &EncoderModel<f32>| -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let l = m.relation_logits(&mut g, &graphs, &queries)?;
        Ok(g.value(l).data().iter().map(|v| v.to_bits()).collect())
    };
    let ok = run(&tied)? == run(&untied)?;
    Ok(CheckResult::exact("tied_equals_untied_at_one_layer", ok, "logits compared bitwise".into()))
}

fn scratch_path(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    std::env::temp_dir().join(format!("edge-transformer-{tag}-{}-{nanos}.ckpt", std::process::id()))
}

fn checkpoint_round_trip(seed: u64) -> Result<CheckResult> {
    let model = small_encoder::<f32>(seed, false, 2)?;
    let items = relation_batch(&CompositionTable::cyclic(5), &[2, 3, 4, 5, 3, 2, 6, 4], seed)?;
    let path = scratch_path("roundtrip");
    model.save(&path)?;
    let loaded = EncoderModel::<f32>::load(&path);
    let _ = std::fs::remove_file(&path);
    let loaded = loaded?;
    let same_params = model.store.iter().zip(loaded.store.iter()).all(|((_, a), (_, b))| {
        a.name == b.name && a.value.shape() == b.value.shape() && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let (acc_a, acc_b) = (evaluate(&model, &items, 3)?, evaluate(&loaded, &items, 3)?);
    let s2s = small_seq2seq::<f32>(seed)?;
    let path = scratch_path("roundtrip-s2s");
    s2s.save(&path)?;
    let loaded_s2s = Seq2SeqModel::<f32>::load(&path);
    let _ = std::fs::remove_file(&path);
    let loaded_s2s = loaded_s2s?;
    let same_s2s = s2s.store().iter().zip(loaded_s2s.store().iter()).all(|((_, a), (_, b))| a.value == b.value && a.name == b.name);
    let ok = same_params && same_s2s && acc_a.to_bits() == acc_b.to_bits() && loaded.config == model.config;
    Ok(CheckResult::exact(
        "checkpoint_round_trip_bitwise",
        ok,
        format!("parameters identical: {same_params}/{same_s2s}; accuracy {acc_a} vs {acc_b}"),
    ))
}

/// Normalization, masking, equivariance, padding, causality, tying and
/// checkpoint invariants.
pub fn invariant_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let (norm, masked) = attention_normalization(seed)?;
    Ok(vec![
        norm,
        masked,
        permutation_equivariance(seed)?,
        padding_neutrality(seed)?,
        causal_invariance(seed)?,
        tied_equals_untied(seed)?,
        checkpoint_round_trip(seed)?,
    ])
}

/// Greedy outputs re-scored with teacher forcing: at every position the
/// argmax of the forced logits must be the emitted token (and `<eos>` after
/// an output that stopped). Returns how many sources satisfy this.
pub fn prefix_consistency<T: Scalar>(model: &Seq2SeqModel<T>, srcs: &[&[usize]], max_len: usize) -> Result<usize> {
    let vocab = model.config.num_output_labels;
    let mut consistent = 0;
    for chunk in srcs.chunks(64) {
        let decoded = model.greedy_decode(chunk, max_len)?;
        for (src, d) in chunk.iter().zip(&decoded) {
            let input: Vec<usize> = std::iter::once(model.bos()).chain(d.tokens.iter().copied()).collect();
            let expected: Vec<usize> = d.tokens.iter().copied().chain((!d.truncated).then(|| model.eos())).collect();
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &[src], &[&input])?;
            let v = g.value(logits).data();
            if expected.iter().enumerate().all(|(p, &t)| crate::model::argmax(&v[p * vocab..(p + 1) * vocab]) == t) {
                consistent += 1;
            }
        }
    }
    Ok(consistent)
}
