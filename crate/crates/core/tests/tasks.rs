mod common;

use std::collections::HashSet;
use std::path::Path;

use common::rng;
use edge_transformer::tasks::{
    compose_oracle, gen_relation_instance, gen_reverse_instance, generate, parse_split, CompositionTable, DatasetSpec,
    LenRange, Split, TableSpec, TaskKind,
};
use edge_transformer::Error;
use proptest::prelude::*;

fn small_relation_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        train_count: 200,
        valid_count: 50,
        tests: vec![LenRange::single(4), LenRange::single(5)],
        test_count: 60,
        seed,
        ..DatasetSpec::relation_default()
    }
}

#[test]
fn cyclic_composition_examples() {
    let t = CompositionTable::cyclic(5);
    assert!(t.is_total());
    assert_eq!(compose_oracle(&t, &[2, 4, 3]).unwrap(), 4);
    for l in 0..5 {
        assert_eq!(compose_oracle(&t, &[l]).unwrap(), l);
    }
    assert_eq!(compose_oracle(&t, &[0, 0, 0, 0]).unwrap(), 0);
    assert!(compose_oracle(&t, &[]).is_err());
    assert!(compose_oracle(&t, &[5]).is_err());
}

#[test]
fn kinship_table_lookups() {
    let t = CompositionTable::kinship();
    assert!(!t.is_total());
    let id = |s| t.label_id(s).unwrap();
    assert_eq!(compose_oracle(&t, &[id("parent"), id("parent")]).unwrap(), id("grandparent"));
    assert_eq!(compose_oracle(&t, &[id("parent"), id("sibling")]).unwrap(), id("uncle"));
    assert_eq!(compose_oracle(&t, &[id("sibling"), id("sibling"), id("child")]).unwrap(), id("nephew"));
    assert!(matches!(compose_oracle(&t, &[id("parent"), id("child")]), Err(Error::UndefinedComposition(_))));
}

#[test]
fn table_files_parse_and_report_bad_lines() {
    let path = Path::new("t.table");
    let t = CompositionTable::parse("labels a b\n# comment\na a = b\nb b = a\n", path).unwrap();
    assert_eq!(t.labels(), ["a", "b"]);
    assert_eq!(t.compose(0, 0), Some(1));
    assert_eq!(t.compose(0, 1), None);
    match CompositionTable::parse("labels a b\na a = c\n", path) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    for spec in ["cyclic:5", "kinship", "file:some/where.table"] {
        assert_eq!(spec.parse::<TableSpec>().unwrap().to_string(), spec);
    }
    assert!("cyclic:0".parse::<TableSpec>().is_err());
}

#[test]
fn generated_instances_revalidate() {
    let mut r = rng(7);
    for table in [CompositionTable::cyclic(5), CompositionTable::kinship()] {
        for k in 2..=6 {
            for _ in 0..100 {
                let x = gen_relation_instance(&table, k, &mut r).unwrap();
                assert_eq!((x.n, x.edges.len(), x.k), (k + 1, k, k));
                x.validate(&table).unwrap();
            }
        }
    }
    assert!(gen_relation_instance(&CompositionTable::cyclic(5), 1, &mut r).is_err());
}

#[test]
fn partial_table_with_no_composable_chain_errors() {
    let t = CompositionTable::parse("labels a b\na b = b\n", Path::new("x")).unwrap();
    let err = gen_relation_instance(&t, 3, &mut rng(0));
    assert!(matches!(err, Err(Error::Generation(_))), "{err:?}");
}

#[test]
fn target_labels_are_balanced() {
    let t = CompositionTable::cyclic(5);
    let mut r = rng(11);
    let total = 10_000;
    let mut counts = [0usize; 5];
    for _ in 0..total {
        counts[gen_relation_instance(&t, 3, &mut r).unwrap().target] += 1;
    }
    let (mean, sd) = (total as f64 / 5.0, (total as f64 * 0.2 * 0.8).sqrt());
    for c in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn query_endpoints_are_uniformly_placed() {
    let t = CompositionTable::cyclic(5);
    let mut r = rng(12);
    let (k, total) = (4, 5000);
    let (mut src, mut dst) = ([0usize; 5], [0usize; 5]);
    for _ in 0..total {
        let x = gen_relation_instance(&t, k, &mut r).unwrap();
        src[x.query.0] += 1;
        dst[x.query.1] += 1;
    }
    let expected = total as f64 / 5.0;
    let chi2 = |c: &[usize; 5]| c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum::<f64>();
    // 99.9th percentile of chi-square with 4 degrees of freedom
    assert!(chi2(&src) < 18.47, "{src:?}");
    assert!(chi2(&dst) < 18.47, "{dst:?}");
}

#[test]
fn reverse_instances() {
    let mut r = rng(3);
    let one = gen_reverse_instance(20, 1, &mut r).unwrap();
    assert_eq!(one.tgt, one.src);
    for len in 1..10 {
        let x = gen_reverse_instance(20, len, &mut r).unwrap();
        x.validate_reverse(20).unwrap();
        assert_eq!(x.src.len(), len);
    }
    let pal = edge_transformer::tasks::Seq2SeqInstance { src: vec![1, 2, 1], tgt: vec![1, 2, 1] };
    pal.validate_reverse(3).unwrap();
    assert!(gen_reverse_instance(0, 3, &mut r).is_err());
}

#[test]
fn generation_is_deterministic_and_splits_are_disjoint() {
    let a = generate(&small_relation_spec(5)).unwrap();
    let b = generate(&small_relation_spec(5)).unwrap();
    let c = generate(&small_relation_spec(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let names: Vec<&str> = a.iter().map(|s| s.spec.name.as_str()).collect();
    assert_eq!(names, ["train", "valid", "test_k4", "test_k5"]);
    let train: HashSet<_> = a[0].relations().unwrap().iter().collect();
    assert!(a[1].relations().unwrap().iter().all(|x| !train.contains(x)));
    assert!(a[1].relations().unwrap().iter().all(|x| x.k == 3));

    let rev = DatasetSpec { train_count: 100, valid_count: 20, test_count: 30, ..DatasetSpec::reverse_default() };
    let splits = generate(&rev).unwrap();
    let train: HashSet<_> = splits[0].sequences().unwrap().iter().map(|x| x.src.clone()).collect();
    for s in &splits[1..] {
        assert!(s.sequences().unwrap().iter().all(|x| !train.contains(&x.src)));
    }
}

#[test]
fn files_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut specs = vec![small_relation_spec(9)];
    specs.push(DatasetSpec { table: TableSpec::Kinship, ..small_relation_spec(9) });
    specs.push(DatasetSpec { train_count: 50, valid_count: 10, test_count: 10, ..DatasetSpec::reverse_default() });
    for spec in specs {
        for split in generate(&spec).unwrap() {
            let path = dir.path().join(format!("{}.tsv", split.spec.name));
            split.write(&path).unwrap();
            let back = Split::read(&path).unwrap();
            assert_eq!(back, split);
            assert_eq!(back.to_text().as_bytes(), std::fs::read(&path).unwrap().as_slice());
        }
    }
}

fn corrupt(text: &str, line: usize, f: impl Fn(&str) -> String) -> String {
    text.lines().enumerate().map(|(k, l)| if k + 1 == line { f(l) } else { l.to_string() } + "\n").collect()
}

fn error_line(text: &str) -> usize {
    match parse_split(text, Path::new("d.tsv")) {
        Err(Error::Format { line, .. }) => line,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn loader_names_the_offending_line() {
    let split = generate(&small_relation_spec(1)).unwrap().remove(0);
    let text = split.to_text();
    assert_eq!(error_line(&corrupt(&text, 4, |l| l.replace("target=", "target=9"))), 4);
    assert_eq!(error_line(&corrupt(&text, 3, |l| format!("{l}\tnoise=1"))), 3);
    assert_eq!(error_line(&corrupt(&text, 5, |l| l.replacen("n=", "k=", 1))), 5);
    assert_eq!(error_line(&corrupt(&text, 7, |l| l.replace("k=2", "k=9").replace("k=3", "k=9"))), 7);
    assert_eq!(error_line(&corrupt(&text, 1, |l| l.replace("task=relation", "task=sorting"))), 1);
    let short: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    assert_eq!(error_line(&short), 11);

    let rev = DatasetSpec { train_count: 20, valid_count: 5, test_count: 5, ..DatasetSpec::reverse_default() };
    let text = generate(&rev).unwrap().remove(0).to_text();
    assert_eq!(error_line(&corrupt(&text, 6, |l| l.replace("tgt=", "tgt=0 "))), 6);
}

#[test]
fn length_ranges_parse_and_display() {
    assert_eq!("4".parse::<LenRange>().unwrap(), LenRange::single(4));
    assert_eq!("2-3".parse::<LenRange>().unwrap(), LenRange::new(2, 3).unwrap());
    assert_eq!(LenRange::new(2, 3).unwrap().to_string(), "2-3");
    assert!("3-2".parse::<LenRange>().is_err());
    assert!("x".parse::<LenRange>().is_err());
    assert_eq!("reverse".parse::<TaskKind>().unwrap(), TaskKind::Reverse);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cyclic_oracle_is_sum_mod_m(m in 1usize..9, chain in proptest::collection::vec(0usize..64, 1..12)) {
        let chain: Vec<usize> = chain.into_iter().map(|l| l % m).collect();
        let t = CompositionTable::cyclic(m);
        prop_assert_eq!(compose_oracle(&t, &chain).unwrap(), chain.iter().sum::<usize>() % m);
    }

    #[test]
    fn cyclic_oracle_is_associative(a in 0usize..5, b in 0usize..5, c in 0usize..5) {
        let t = CompositionTable::cyclic(5);
        let left = compose_oracle(&t, &[compose_oracle(&t, &[a, b]).unwrap(), c]).unwrap();
        let right = compose_oracle(&t, &[a, compose_oracle(&t, &[b, c]).unwrap()]).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn every_instance_is_a_permuted_chain(seed in 0u64..10_000, k in 2usize..9) {
        let x = gen_relation_instance(&CompositionTable::cyclic(5), k, &mut rng(seed)).unwrap();
        prop_assert!(x.validate(&CompositionTable::cyclic(5)).is_ok());
        let nodes: HashSet<usize> = x.edges.iter().flat_map(|e| [e.0, e.1]).collect();
        prop_assert_eq!(nodes.len(), k + 1);
        prop_assert!(nodes.iter().all(|&v| v < k + 1));
    }
}
