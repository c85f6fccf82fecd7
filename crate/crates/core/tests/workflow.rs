use std::collections::{BTreeMap, HashMap};
use std::fs;

use diffshape::dissim::{batch_dissims, dissim_pair, pair_histograms, DissimParams, PairGroup};
use diffshape::enrich::{interpolate_pair, perturb_surface, rebalance, EnrichConfig, InterpolationParams, PerturbationConfig};
use diffshape::features::{build_features, feature_pairs, select_reference, SelectionRule, ALL};
use diffshape::field::EigenBasis;
use diffshape::forest::ForestConfig;
use diffshape::forest::ImportanceConfig;
use diffshape::pipeline::{run_pipeline, HistogramConfig, PipelineConfig, ReferenceConfig};
use diffshape::seeds::derive_seed;
use diffshape::standardize::{standardize, Similarity};
use diffshape::surface::{symmetric_trimmed_hausdorff, Provenance, SurfaceDataset};
use diffshape::synth::{generate, SynthParams, CLOSED, GAPPED};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(n_closed: usize, n_gapped: usize) -> SurfaceDataset {
    generate(&SynthParams {
        n_closed,
        n_gapped,
        ring_size: 30,
        ring_count: 6,
        seed: 17,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn perturbations_are_mostly_accepted() {
    let ds = generate(&SynthParams {
        n_closed: 5,
        n_gapped: 5,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let cfg = PerturbationConfig::default();
    let basis = EigenBasis::validated(cfg.truncation);
    let mut accepted = 0;
    for trial in 0..50u64 {
        let s = &ds.entries[trial as usize % ds.len()].surface;
        let p = perturb_surface(s, &cfg.realize(&basis, derive_seed(1, "trial", &trial.to_string())).unwrap()).unwrap();
        assert!(p.drift > 0.0);
        if p.rejection.is_none() {
            accepted += 1;
        }
    }
    assert!(accepted >= 40, "{accepted} of 50 accepted");
}

#[test]
fn interpolation_lies_between_its_endpoints() {
    let ds = generate(&SynthParams {
        n_closed: 1,
        n_gapped: 1,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let (s, t) = (&ds.entries[0].surface, &ds.entries[1].surface);
    let a = standardize(s).unwrap().surface;
    let b = standardize(t).unwrap().surface;
    let trim = 0.05;
    let d = symmetric_trimmed_hausdorff(a.points(), b.points(), trim).unwrap();
    let at = |t_star: f64| {
        let p = InterpolationParams {
            t_star,
            ..Default::default()
        };
        interpolate_pair(s, t, "mid", &p).unwrap()
    };
    let start = at(0.0);
    assert_eq!(start.node, 0);
    assert_eq!(start.surface.points(), a.points());
    let end = at(1.0);
    let to_b = symmetric_trimmed_hausdorff(end.surface.points(), b.points(), trim).unwrap();
    assert!(to_b <= end.terminal_mismatch + 1e-12);
    let mid = at(0.5);
    assert_eq!(mid.node, 2);
    assert_eq!(mid.surface.id(), "mid");
    assert!(symmetric_trimmed_hausdorff(mid.surface.points(), a.points(), trim).unwrap() < d);
    assert!(symmetric_trimmed_hausdorff(mid.surface.points(), b.points(), trim).unwrap() < d);
    let p = InterpolationParams {
        max_haus: Some(0.5 * d),
        ..Default::default()
    };
    assert!(interpolate_pair(s, t, "x", &p).is_err());
}

#[test]
fn rebalance_fills_the_deficit_and_keeps_originals() {
    let ds = small(6, 3);
    let cfg = EnrichConfig {
        closeness_quantile: 1.0,
        perturb: true,
        seed: 4,
        ..Default::default()
    };
    let (out, report) = rebalance(&ds, &cfg).unwrap();
    for (o, e) in ds.entries.iter().zip(&out.entries) {
        assert_eq!(o, e);
    }
    let count = |label: &str, p: Provenance| {
        out.entries.iter().filter(|e| e.label == label && e.provenance == p).count()
    };
    let interp = count(GAPPED, Provenance::Interpolated);
    assert_eq!(3 + interp + report.shortfall.get(GAPPED).copied().unwrap_or(0), 6);
    assert_eq!(count(CLOSED, Provenance::Interpolated), 0);
    for e in out.entries.iter().filter(|e| e.provenance == Provenance::Interpolated) {
        assert!(e.surface.id().starts_with("interp_"));
        assert_eq!(e.parents.len(), 2);
    }
    for e in out.entries.iter().filter(|e| e.provenance == Provenance::Perturbed) {
        assert_eq!(e.surface.id(), format!("{}_pert", e.parents[0]));
    }
    let perturbed = out.entries.iter().filter(|e| e.provenance == Provenance::Perturbed).count();
    let pert_rows = report.rows.iter().filter(|r| r.provenance == Provenance::Perturbed).count();
    assert_eq!(pert_rows, 9 + interp);
    assert!(perturbed * 5 >= pert_rows * 4);
    assert!(report.to_csv().lines().count() == report.rows.len() + 1);

    let (again, report2) = rebalance(&ds, &cfg).unwrap();
    assert_eq!(again, out);
    assert_eq!(report2, report);
}

#[test]
fn batches_are_deterministic_and_cached() {
    let ds = small(3, 2);
    let ids: Vec<String> = ds.entries.iter().map(|e| e.surface.id().to_string()).collect();
    let pairs: Vec<(String, String)> = ids
        .iter()
        .flat_map(|a| ids.iter().take(2).map(move |b| (a.clone(), b.clone())))
        .collect();
    let params = DissimParams::default();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("sub").join("cache.csv");
    let one = batch_dissims(&ds, &pairs, &params, None, 1).unwrap();
    let four = batch_dissims(&ds, &pairs, &params, Some(&cache), 4).unwrap();
    assert_eq!(one.records, four.records);
    assert_eq!(four.executed, pairs.len());
    let warm = batch_dissims(&ds, &pairs, &params, Some(&cache), 2).unwrap();
    assert_eq!(warm.executed, one.records.iter().filter(|r| !r.converged).count());
    for (a, b) in one.records.iter().zip(&warm.records) {
        assert_eq!(a.source_id, b.source_id);
        for k in 0..9 {
            assert!((a.d[k] - b.d[k]).abs() <= 1e-12 * (1.0 + a.d[k].abs()));
        }
    }
    let text = fs::read_to_string(&cache).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("source_id")).count(), 1);

    let direct = dissim_pair(&ds.entries[2].surface, &ds.entries[0].surface, &params).unwrap();
    let from_batch = one.records.iter().find(|r| r.source_id == ids[2] && r.target_id == ids[0]).unwrap();
    assert_eq!(&direct, from_batch);

    let bad = vec![("nope".to_string(), ids[0].clone())];
    assert!(batch_dissims(&ds, &bad, &params, None, 1).is_err());
}

#[test]
fn self_pair_is_near_zero_and_strain_quantiles_order() {
    let ds = small(2, 1);
    let params = DissimParams::default();
    let s = &ds.entries[0].surface;
    let r = dissim_pair(s, s, &params).unwrap();
    assert!(r.converged);
    assert!(r.d[8] <= 1e-3, "D9 {}", r.d[8]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let moved = Similarity::random(&mut rng, 1.0, 2.0).apply_surface(s).unwrap();
    let r = dissim_pair(&moved, s, &params).unwrap();
    assert!(r.d.iter().all(|v| v.abs() <= 1e-3), "{:?}", r.d);
    let x = dissim_pair(s, &ds.entries[2].surface, &params).unwrap();
    for i in 0..4 {
        assert!(x.d[i] >= x.d[i + 4], "{:?}", x.d);
    }
}

#[test]
fn features_and_histograms() {
    let ds = small(4, 3);
    let rule = SelectionRule::RandomFromClass {
        label: CLOSED.into(),
        originals_only: true,
    };
    let reference = select_reference(&ds, rule.clone(), 2, 5).unwrap();
    assert_eq!(reference, select_reference(&ds, rule.clone(), 2, 5).unwrap());
    assert!(select_reference(&ds, rule.clone(), 5, 5).is_err());
    let all = select_reference(&ds, rule, 4, 5).unwrap();
    assert_eq!(all.ids, vec!["closed_000", "closed_001", "closed_002", "closed_003"]);

    let pairs = feature_pairs(&ds, &reference);
    assert_eq!(pairs.len(), 14);
    let params = DissimParams::default();
    let batch = batch_dissims(&ds, &pairs, &params, None, 1).unwrap();
    let m = build_features(&ds, &reference, &batch.records, &ALL, false).unwrap();
    assert_eq!(m.columns.len(), 18);
    assert_eq!(m.values.len(), 7);
    for (row, id) in m.values.iter().zip(&m.row_ids) {
        if let Some(j) = reference.ids.iter().position(|r| r == id) {
            assert!(row[8 * 2 + j] <= 1e-3);
        }
    }
    assert!(build_features(&ds, &reference, &batch.records[1..], &ALL, true).is_err());
    let partial = build_features(&ds, &reference, &batch.records[1..], &ALL, false).unwrap();
    assert_eq!(partial.complete.iter().filter(|c| !**c).count(), 1);
    assert!(build_features(&ds, &reference, &batch.records, &[10], false).is_err());

    let labels: HashMap<String, String> =
        ds.entries.iter().map(|e| (e.surface.id().to_string(), e.label.clone())).collect();
    let hp: Vec<(String, String)> = vec![
        ("closed_000".into(), "closed_001".into()),
        ("gapped_000".into(), "gapped_001".into()),
        ("closed_000".into(), "gapped_000".into()),
    ];
    let hb = batch_dissims(&ds, &hp, &params, None, 1).unwrap();
    let hs = pair_histograms(&hb.records, &labels, CLOSED, GAPPED, 1, 5).unwrap();
    assert_eq!(hs.len(), 3);
    assert_eq!(hs.iter().map(|h| h.counts.iter().sum::<usize>()).sum::<usize>(), 3);
    assert_eq!(hs[0].group, PairGroup::AA);
    assert!(pair_histograms(&hb.records[..2], &labels, CLOSED, GAPPED, 1, 5).is_err());
}

fn tiny(output: std::path::PathBuf, workers: usize) -> PipelineConfig {
    PipelineConfig {
        synth: SynthParams {
            n_closed: 8,
            n_gapped: 5,
            ring_size: 30,
            ring_count: 6,
            ..Default::default()
        },
        output,
        enrich: EnrichConfig {
            perturb: true,
            closeness_quantile: 1.0,
            ..Default::default()
        },
        reference: ReferenceConfig {
            size: 3,
            ..Default::default()
        },
        forest: ForestConfig {
            n_trees: 20,
            ..Default::default()
        },
        restarts: 2,
        importance: ImportanceConfig {
            n_repeats: 3,
            n_permutations: 3,
            ..Default::default()
        },
        histogram: Some(HistogramConfig {
            pairs_per_group: 2,
            bins: 4,
            ..Default::default()
        }),
        workers,
        ..Default::default()
    }
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(dir.path().join("a"), 1);
    let b = tiny(dir.path().join("b"), 2);
    let ra = run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    assert_eq!(ra.feature_cols, 27);
    assert_eq!(ra.restarts.len(), 2);
    let counts: BTreeMap<String, usize> = ra.class_counts.clone();
    assert!(counts[CLOSED] >= 16);
    for f in ["report.json", "features.csv", "oob.csv", "importance.csv", "medians.csv", "forest_1.txt", "dataset/manifest.csv"] {
        let x = fs::read_to_string(dir.path().join("a").join(f)).unwrap();
        let y = fs::read_to_string(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let cache = a.cache_path();
    let before = fs::read_to_string(&cache).unwrap();
    let again = run_pipeline(&a).unwrap();
    assert_eq!(fs::read_to_string(&cache).unwrap(), before);
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&ra).unwrap());

    let reduced = PipelineConfig {
        reduced_features: true,
        histogram: None,
        ..tiny(dir.path().join("c"), 1)
    };
    let rc = run_pipeline(&reduced).unwrap();
    assert_eq!(rc.feature_cols, 9);
    assert!(rc.medians.is_empty());
}
