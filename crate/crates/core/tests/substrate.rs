mod common;

use common::{assert_close, det, det_tensor, random_tensor, rng};
use edge_transformer::autodiff::{contract, grad_check, Adam, AdamConfig, Graph, ParamStore};
use edge_transformer::{BoolTensor, Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

// Expected values below were computed offline with plain loops and central
// differences in numpy, independently of these kernels.

#[test]
fn contract_three_index_against_loop_oracle() {
    let a = det_tensor(&[2, 3, 2], 1.0);
    let b = det_tensor(&[3, 2, 2], 2.0);
    let out = contract(&a, &b, "ild,ldj->ij").unwrap();
    let want = [-0.6891904801893223, -1.4370411594603316, 2.304520172128445, 2.3409111687577555];
    assert_close(out.data(), &want, 1e-12, "contract");

    let mut g = Graph::new();
    let va = g.leaf(a);
    let vb = g.leaf(b);
    let w = g.input(det_tensor(&[2, 2], 3.0));
    let c = g.contract(va, vb, "ild,ldj->ij").unwrap();
    let cw = g.mul(c, w).unwrap();
    let loss = g.sum(cw);
    g.backward(loss).unwrap();
    let ga = [
        -0.029562112757730574, 0.04800943842475647, 0.10046903442528787, 0.10037700759468748,
        0.04778149387263397, -0.029806745738270024, -1.0867779878243056, -0.24622358241188635,
        0.7231212397762476, 1.314228181392707, 1.2179111430477008, 0.4845499907979445,
    ];
    let gb = [
        0.16287214710253295, -0.1259910991091573, 0.3825044083693996, 0.1353454845975932,
        0.5503664921580054, 0.3783636923770928, 0.6437390529523412, 0.5701721492723522,
        0.6499845532914605, 0.6848104803225397, 0.568257693345231, 0.7067629255175234,
    ];
    // finite differences at h = 1e-6 carry ~1e-9 error
    assert_close(g.grad(va).unwrap().data(), &ga, 1e-7, "d/da");
    assert_close(g.grad(vb).unwrap().data(), &gb, 1e-7, "d/db");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[4], 0.7));
    let y = g.softmax_masked(x, 0, None).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);

    let x = g.input(Tensor::new(&[3], vec![0.0, 5.0, 0.0]).unwrap());
    let mask = BoolTensor::new(&[3], vec![true, false, true]).unwrap();
    let y = g.softmax_masked(x, 0, Some(&mask)).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5]);

    let x = g.input(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax_masked(x, 0, None).unwrap();
    assert_close(g.value(y).data(), &[0.09003057317038046, 0.24472847105479767, 0.6652409557748219], 1e-15, "softmax");
    assert!((g.value(y).sum() - 1.0).abs() <= 1e-12);
}

#[test]
fn softmax_fully_masked_slice_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 3]));
    let mask = BoolTensor::new(&[2, 3], vec![true, false, false, false, false, false]).unwrap();
    match g.softmax_masked(x, 1, Some(&mask)) {
        Err(Error::DegenerateMask { slice }) => assert_eq!(slice, 1),
        other => panic!("expected degenerate mask, got {other:?}"),
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.input(Tensor::ones(&[4]));
    let bias = g.input(Tensor::zeros(&[4]));
    let x = g.input(Tensor::full(&[1, 4], 3.25));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let gain2 = g.input(Tensor::ones(&[2]));
    let bias2 = g.input(Tensor::zeros(&[2]));
    let x = g.input(Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gain2, bias2).unwrap();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_close(g.value(y).data(), &[s, -s], 1e-15, "normalized pair");

    let x = g.input(det_tensor(&[3, 4], 4.0));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let want = [
        1.6423524397223963, -0.4082816781854524, -1.046926452500284, -0.18714430903666354,
        -1.2912661665891814, -0.5083248265815695, 0.42298269606094996, 1.3766082971098006,
        -1.635534533707535, 0.010759859527920726, 0.8515980735470043, 0.7731766006326106,
    ];
    assert_close(g.value(y).data(), &want, 1e-12, "layer_norm");
    for row in g.value(y).data().chunks(4) {
        assert!(row.iter().sum::<f64>().abs() / 4.0 < 1e-10);
    }
}

#[test]
fn linear_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(det_tensor(&[2, 3], 5.0));
    let eye = g.input(Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 }));
    let zero_b = g.input(Tensor::zeros(&[3]));
    let y = g.linear(x, eye, Some(zero_b)).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let zeros = g.input(Tensor::zeros(&[2, 3]));
    let w = g.input(det_tensor(&[3, 2], 6.0));
    let b = g.input(det_tensor(&[2], 7.0));
    let y = g.linear(zeros, w, Some(b)).unwrap();
    let bias = det(2, 7.0);
    assert_eq!(g.value(y).data(), &[bias[0], bias[1], bias[0], bias[1]]);

    let y = g.linear(x, w, Some(b)).unwrap();
    let want = [0.09468106087147032, -0.29719118300061675, 1.2912235171732127, 1.551030220959185];
    assert_close(g.value(y).data(), &want, 1e-12, "linear");

    let bad = g.input(Tensor::zeros(&[2, 4]));
    assert!(matches!(g.linear(bad, w, Some(b)), Err(Error::Shape(_))));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(r);
    g.backward(s).unwrap();
    // subgradient at zero is zero
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let a = g.leaf(det_tensor(&[2, 3], 1.5));
    let ones = g.input(Tensor::ones(&[3]));
    let m = g.mul(a, ones).unwrap();
    assert_eq!(g.value(m), g.value(a));

    let b = g.leaf(det_tensor(&[2, 3], 2.5));
    let c = g.add(a, b).unwrap();
    let up = g.input(det_tensor(&[2, 3], 9.0));
    let cu = g.mul(c, up).unwrap();
    let loss = g.sum(cu);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), g.value(up));
    assert_eq!(g.grad(b).unwrap(), g.value(up));

    let wrong = g.input(Tensor::zeros(&[2]));
    assert!(g.add(a, wrong).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let c = 7;
    let logits = g.input(Tensor::full(&[3, c], 0.4));
    let loss = g.cross_entropy(logits, &[0, 3, 6], None).unwrap();
    assert!((g.value(loss).data()[0] - (c as f64).ln()).abs() < 1e-12);

    let saturated = g.input(Tensor::from_fn(&[1, 4], |k| if k == 2 { 1e6 } else { 0.0 }));
    let loss = g.cross_entropy(saturated, &[2], None).unwrap();
    assert!(g.value(loss).data()[0].abs() < 1e-12);

    let logits = g.input(det_tensor(&[2, 5], 8.0));
    let loss = g.cross_entropy(logits, &[1, 3], None).unwrap();
    assert!((g.value(loss).data()[0] - 1.5961372941309053).abs() < 1e-12);

    // ignored rows do not count toward the mean
    let padded = g.input(Tensor::new(&[3, 5], [det(10, 8.0), vec![9.0; 5]].concat()).unwrap());
    let loss = g.cross_entropy(padded, &[1, 3, 0], Some(0)).unwrap();
    assert!((g.value(loss).data()[0] - 1.5961372941309053).abs() < 1e-12);

    assert!(matches!(g.cross_entropy(logits, &[1, 5], None), Err(Error::Index(_))));
    assert!(matches!(g.cross_entropy(logits, &[0, 0], Some(0)), Err(Error::Index(_))));
}

#[test]
fn adam_recurrence() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
    let mut adam = Adam::new(&store, AdamConfig::with_lr(0.01));
    store.get_mut(id).grad = Tensor::new(&[1], vec![0.3]).unwrap();
    adam.step(&mut store).unwrap();
    assert!((store.value(id).data()[0] - 0.4900000003333333).abs() < 1e-15);
    // first step moves by ~lr * sign(g)
    assert!((0.5 - store.value(id).data()[0] - 0.01).abs() < 1e-8);
    adam.step(&mut store).unwrap();
    assert!((store.value(id).data()[0] - 0.4800000006666667).abs() < 1e-15);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut store = ParamStore::<f32>::new();
    let id = store.insert("w", Tensor::new(&[3], vec![0.25, -1.0, 3.0]).unwrap()).unwrap();
    let before = store.value(id).clone();
    let mut adam = Adam::new(&store, AdamConfig::default());
    for _ in 0..50 {
        adam.step(&mut store).unwrap();
    }
    assert_eq!(store.value(id), &before);
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let mut store = ParamStore::<f64>::new();
    store.insert("fine", Tensor::zeros(&[2])).unwrap();
    let bad = store.insert("layer3.wq", Tensor::zeros(&[2])).unwrap();
    store.get_mut(bad).grad.data_mut()[1] = f64::NAN;
    let mut adam = Adam::new(&store, AdamConfig::default());
    let err = adam.step(&mut store).unwrap_err();
    assert!(err.to_string().contains("layer3.wq"), "{err}");
}

#[test]
fn gradient_clipping_bounds_the_global_norm() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", Tensor::zeros(&[2])).unwrap();
    let b = store.insert("b", Tensor::zeros(&[1])).unwrap();
    store.get_mut(a).grad = Tensor::new(&[2], vec![3.0, 0.0]).unwrap();
    store.get_mut(b).grad = Tensor::new(&[1], vec![4.0]).unwrap();
    assert_eq!(store.clip_grad_norm(1.0), 5.0);
    assert!((store.grad_norm() - 1.0).abs() < 1e-15);
    assert!((store.get(a).grad.data()[0] - 0.6).abs() < 1e-15);
}

#[test]
fn grad_check_trivial_objectives() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("x", det_tensor(&[5], 0.3)).unwrap();
    let report = grad_check(
        &mut store,
        |g, s| {
            let x = g.param(s, id);
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    assert_eq!(report.entries_checked, 5);

    let report = grad_check(&mut store, |g, _| Ok(g.input(Tensor::scalar(2.5))), 1e-5).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

/// Weighted-sum objective so every output entry carries a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, y: edge_transformer::autodiff::Var, seed: u64) -> edge_transformer::Result<edge_transformer::autodiff::Var> {
    let w = g.input(random_tensor(g.shape(y), &mut rng(seed ^ 0xABCD)));
    let yw = g.mul(y, w)?;
    Ok(g.sum(yw))
}

#[test]
fn every_op_passes_grad_check_over_seeds() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let (n1, n2, n3) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(2..5));
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", random_tensor(&[n1, n2, n3], &mut r)).unwrap();
        let b = store.insert("b", random_tensor(&[n2, n3, n1], &mut r)).unwrap();
        let v = store.insert("v", random_tensor(&[n3], &mut r)).unwrap();
        let w = store.insert("w", random_tensor(&[n3, 3], &mut r)).unwrap();
        let gain = store.insert("gain", random_tensor(&[n3], &mut r)).unwrap();
        let mask: Vec<bool> = (0..n1 * n2 * n3).map(|k| k % n3 == 0 || r.gen_bool(0.6)).collect();
        let mask = BoolTensor::new(&[n1, n2, n3], mask).unwrap();
        let targets: Vec<usize> = (0..n1 * n2).map(|_| r.gen_range(0..3)).collect();
        let index: Vec<Option<usize>> = (0..5).map(|k| if k == 2 { None } else { Some(r.gen_range(0..n1 * n2)) }).collect();

        let checks: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> edge_transformer::Result<_>>)> = vec![
            ("contract", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let (x, y) = (g.param(s, a), g.param(s, b));
                let c = g.contract(x, y, "ijk,jki->ik")?;
                weighted(g, c, seed)
            })),
            ("contract-summed-out", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let (x, y) = (g.param(s, a), g.param(s, v));
                let c = g.contract(x, y, "ijk,k->j")?;
                weighted(g, c, seed)
            })),
            ("softmax", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let x = g.param(s, a);
                let y = g.softmax_masked(x, 2, Some(&mask))?;
                weighted(g, y, seed)
            })),
            ("softmax-mid-axis", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let x = g.param(s, a);
                let y = g.softmax_masked(x, 1, None)?;
                weighted(g, y, seed)
            })),
            ("layer_norm", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let (x, gn, bs) = (g.param(s, a), g.param(s, gain), g.param(s, v));
                let y = g.layer_norm(x, gn, bs)?;
                weighted(g, y, seed)
            })),
            ("linear-relu", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let (x, wt) = (g.param(s, a), g.param(s, w));
                let y = g.linear(x, wt, None)?;
                let y = g.relu(y);
                weighted(g, y, seed)
            })),
            ("mul-add-broadcast", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let (x, y) = (g.param(s, a), g.param(s, v));
                let p = g.mul(x, y)?;
                let q = g.add(p, y)?;
                let q = g.scale(q, 0.7);
                weighted(g, q, seed)
            })),
            ("cross_entropy", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let (x, wt) = (g.param(s, a), g.param(s, w));
                let logits = g.linear(x, wt, None)?;
                g.cross_entropy(logits, &targets, Some(1))
                    .or_else(|_| g.cross_entropy(logits, &targets, None))
            })),
            ("gather-concat-mask", Box::new(|g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let x = g.param(s, a);
                let rows = g.gather(x, &index)?;
                let cat = g.concat_last(&[rows, rows])?;
                let keep = [true, false, true, true, false];
                let m = g.mask_rows(cat, &keep)?;
                let r = g.reshape(m, &[5 * 2 * n3])?;
                weighted(g, r, seed)
            })),
        ];
        for (name, f) in checks {
            let report = grad_check(&mut store, |g, s| f(g, s), 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed} op {name}: {report:?}");
        }
    }
}

fn naive_contract(a: &Tensor<f64>, b: &Tensor<f64>, la: &str, lb: &str, lo: &str) -> Vec<f64> {
    use std::collections::BTreeMap;
    let mut ext = BTreeMap::new();
    for (c, &n) in la.chars().zip(a.shape()).chain(lb.chars().zip(b.shape())) {
        ext.insert(c, n);
    }
    let letters: Vec<char> = ext.keys().copied().collect();
    let out_shape: Vec<usize> = lo.chars().map(|c| ext[&c]).collect();
    let mut out = vec![0.0; out_shape.iter().product()];
    let total: usize = letters.iter().map(|c| ext[c]).product();
    for flat in 0..total {
        let mut rem = flat;
        let mut val = BTreeMap::new();
        for c in letters.iter().rev() {
            val.insert(*c, rem % ext[c]);
            rem /= ext[c];
        }
        let idx = |s: &str| s.chars().map(|c| val[&c]).collect::<Vec<_>>();
        let o = idx(lo).iter().zip(&out_shape).fold(0, |acc, (&i, &n)| acc * n + i);
        out[o] += a.get(&idx(la)) * b.get(&idx(lb));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contract_matches_naive_loops(
        seed in any::<u64>(),
        ext in proptest::collection::vec(1usize..6, 5),
        which in 0usize..6,
    ) {
        let specs = [
            ("ij", "jk", "ik"),
            ("bij", "bjk", "bik"),
            ("ild", "ldj", "ij"),
            ("bilh", "bljh", "bijl"),
            ("ijk", "k", "ji"),
            ("ia", "jb", "ij"),
        ];
        let (la, lb, lo) = specs[which];
        let letters = ['i', 'j', 'k', 'l', 'b', 'd', 'h', 'a'];
        let extent = |c: char| ext[letters.iter().position(|&x| x == c).unwrap() % 5];
        let shape_of = |s: &str| s.chars().map(extent).collect::<Vec<_>>();
        let (sa, sb) = (shape_of(la), shape_of(lb));
        prop_assume!(sa.iter().product::<usize>() <= 10_000 && sb.iter().product::<usize>() <= 10_000);
        let mut r = rng(seed);
        let a = random_tensor(&sa, &mut r);
        let b = random_tensor(&sb, &mut r);
        let got = contract(&a, &b, &format!("{la},{lb}->{lo}")).unwrap();
        let want = naive_contract(&a, &b, la, lb, lo);
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * 1f64.max(w.abs()), "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_is_a_distribution(
        seed in any::<u64>(),
        rows in 1usize..5,
        len in 1usize..9,
    ) {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[rows, len], |_| r.gen_range(-30.0..30.0));
        let mask: Vec<bool> = (0..rows * len).map(|k| k % len == rows % len || r.gen_bool(0.5)).collect();
        let mask = BoolTensor::new(&[rows, len], mask).unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.input(x);
        let y = g.softmax_masked(xv, 1, Some(&mask)).unwrap();
        for (row, m) in g.value(y).data().chunks(len).zip(mask.data().chunks(len)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (&p, &ok) in row.iter().zip(m) {
                prop_assert!(p >= 0.0);
                if !ok { prop_assert_eq!(p, 0.0); }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(seed in any::<u64>(), rows in 1usize..6, d in 2usize..12) {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[rows, d], |_| r.gen_range(-20.0..20.0));
        let mut g = Graph::<f64>::new();
        let xv = g.input(x);
        let gain = g.input(Tensor::ones(&[d]));
        let bias = g.input(Tensor::zeros(&[d]));
        let y = g.layer_norm(xv, gain, bias).unwrap();
        for (row, xrow) in g.value(y).data().chunks(d).zip(g.value(xv).data().chunks(d)) {
            let mean_x = xrow.iter().sum::<f64>() / d as f64;
            let var_x = xrow.iter().map(|v| (v - mean_x).powi(2)).sum::<f64>() / d as f64;
            prop_assume!(var_x >= 10.0);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() <= 1e-10);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fused_triangular_ops_match_einsum_and_finite_differences(
        seed in any::<u64>(),
        b in 1usize..3,
        m in 1usize..3,
        n in 1usize..5,
        h in 1usize..4,
    ) {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let q = store.insert("q", random_tensor(&[b, n, n, m, h], &mut r)).unwrap();
        let k = store.insert("k", random_tensor(&[b, n, n, m, h], &mut r)).unwrap();
        let alpha = store.insert("alpha", random_tensor(&[b, m, n, n, n], &mut r)).unwrap();

        let mut g = Graph::new();
        let (vq, vk, va) = (g.param(&store, q), g.param(&store, k), g.param(&store, alpha));
        let fused = g.triangular_scores(vq, vk).unwrap();
        let reference = g.contract(vq, vk, "bilmh,bljmh->bmijl").unwrap();
        assert_close(g.value(fused).data(), g.value(reference).data(), 1e-12, "scores");
        let fused = g.triangular_values(va, vq, vk).unwrap();
        let weighted_values = g.contract(va, vq, "bmijl,bilmh->bjmhil").unwrap();
        let reference = g.contract(weighted_values, vk, "bjmhil,bljmh->bijmh").unwrap();
        assert_close(g.value(fused).data(), g.value(reference).data(), 1e-12, "values");

        let report = grad_check(
            &mut store,
            |g, s| {
                let (vq, vk, va) = (g.param(s, q), g.param(s, k), g.param(s, alpha));
                let scores = g.triangular_scores(vq, vk)?;
                let mixed = g.add(scores, va)?;
                let out = g.triangular_values(mixed, vq, vk)?;
                weighted(g, out, seed)
            },
            1e-5,
        )
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-6, "{report:?}");
        let mut g = Graph::new();
        let (vq, va) = (g.param(&store, q), g.param(&store, alpha));
        let wide = g.input(Tensor::zeros(&[b, n, n, m, h + 1]));
        prop_assert!(g.triangular_values(va, vq, wide).is_err());
        prop_assert!(g.triangular_scores(vq, wide).is_err());
    }
}
