use diffshape::forest::{group_importance, train, ForestConfig, ImportanceConfig, Node, TrainedForest};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(n: usize, p: usize, seed: u64, signal: usize) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let pos = i % 2 == 0;
        let mut row: Vec<f64> = (0..p).map(|_| rng.random()).collect();
        row[signal] = if pos { 1.0 + rng.random::<f64>() } else { -rng.random::<f64>() };
        x.push(row);
        y.push(if pos { "a" } else { "b" }.to_string());
    }
    (x, y)
}

fn config(seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees: 60,
        seed,
        ..Default::default()
    }
}

#[test]
fn identical_rows_give_single_leaves() {
    let x = vec![vec![0.5, 1.0, -2.0]; 40];
    let y: Vec<String> = (0..40).map(|i| if i < 20 { "a" } else { "b" }.to_string()).collect();
    let f = train(&x, &y, &config(1)).unwrap();
    for t in &f.trees {
        assert_eq!(t.nodes.len(), 1);
        assert!(matches!(t.nodes[0], Node::Leaf { .. }));
    }
}

#[test]
fn single_class_is_degenerate() {
    let (x, _) = data(30, 3, 2, 0);
    let y = vec!["a".to_string(); 30];
    let f = train(&x, &y, &config(2)).unwrap();
    assert!(f.degenerate);
    assert!(x.iter().all(|r| f.predict_row(r) == "a"));
}

#[test]
fn separating_feature_dominates_importance() {
    let (x, y) = data(150, 6, 3, 4);
    let f = train(&x, &y, &config(3)).unwrap();
    let groups: Vec<(String, Vec<usize>)> = (0..6).map(|j| (format!("f{j}"), vec![j])).collect();
    let imp = group_importance(
        &f,
        &x,
        &y,
        &groups,
        &ImportanceConfig {
            n_repeats: 20,
            n_permutations: 1,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(imp[0].group, "f4");
    assert!(imp[0].importance >= 0.3, "{:?}", imp[0]);
    for g in &imp[1..] {
        assert!(g.importance.abs() < 0.05, "{g:?}");
    }
}

#[test]
fn identity_scramble_has_no_importance() {
    let (x, y) = data(80, 4, 4, 1);
    let f = train(&x, &y, &config(4)).unwrap();
    let groups = vec![("all".to_string(), vec![0, 1, 2, 3])];
    let imp = group_importance(
        &f,
        &x,
        &y,
        &groups,
        &ImportanceConfig {
            n_repeats: 3,
            identity: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(imp[0].importance, 0.0);
    assert_eq!(imp[0].std_dev, 0.0);
}

#[test]
fn oob_report_is_consistent() {
    let (x, y) = data(100, 5, 5, 2);
    let cfg = config(5);
    let f = train(&x, &y, &cfg).unwrap();
    let m = (cfg.subsample_fraction * 100.0).round() as usize;
    for bag in &f.in_bag {
        assert_eq!(bag.len(), m);
        assert!(bag.windows(2).all(|w| w[0] < w[1]));
    }
    let r = f.oob_evaluate(&x, &y).unwrap();
    assert_eq!(r.evaluated + r.excluded, 100);
    for row in &r.confusion {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(r.accuracy >= 0.95);
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let (x, y) = data(60, 4, 6, 0);
    let a = train(&x, &y, &config(6)).unwrap();
    let b = train(&x, &y, &config(6)).unwrap();
    assert_eq!(a, b);
    let text = a.to_text();
    let back = TrainedForest::from_text(&text).unwrap();
    assert_eq!(back.to_text(), text);
    for r in &x {
        assert_eq!(back.predict_row(r), a.predict_row(r));
    }
    let c = train(&x, &y, &config(7)).unwrap();
    assert_ne!(a.in_bag, c.in_bag);
}

#[test]
fn invalid_configurations_fail() {
    let (x, y) = data(20, 3, 8, 0);
    let bad = |c: ForestConfig| train(&x, &y, &c).is_err();
    assert!(bad(ForestConfig { n_trees: 0, ..config(0) }));
    assert!(bad(ForestConfig { features_per_split: Some(4), ..config(0) }));
    assert!(bad(ForestConfig { subsample_fraction: 1.5, ..config(0) }));
    assert!(bad(ForestConfig { min_impurity_decrease: -1.0, ..config(0) }));
    let mut nan = x.clone();
    nan[0][0] = f64::NAN;
    assert!(train(&nan, &y, &config(0)).is_err());
    assert!(train(&x, &y[..10], &config(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn predictions_are_training_labels(seed in any::<u64>(), n in 10usize..60) {
        let (x, y) = data(n, 3, seed, 1);
        let f = train(&x, &y, &ForestConfig { n_trees: 15, seed, ..Default::default() }).unwrap();
        for r in &x {
            let p = f.predict_row(r);
            prop_assert!(p == "a" || p == "b");
        }
        let r = f.oob_evaluate(&x, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
    }
}
