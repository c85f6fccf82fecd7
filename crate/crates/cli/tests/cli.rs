use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffshape"))
        .args(args)
        .env("DIFFSHAPE_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn diffshape")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen", "--out", p(&data), "--n-closed", "5", "--n-gapped", "4", "--ring-size", "30", "--ring-count", "6",
    ]);
    data
}

#[test]
fn register_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let (a, b) = (data.join("closed_000.rgs"), data.join("closed_001.rgs"));
    let out = ok(&["register", p(&a), p(&b)]);
    let mut lines = out.lines();
    assert_eq!(
        lines.next().unwrap(),
        "source_id,target_id,kin,terminal_mismatch,converged,iterations,wallclock_s"
    );
    assert!(lines.next().unwrap().starts_with("closed_000,closed_001,"));

    let cache = dir.path().join("rows.csv");
    let flows = dir.path().join("flow");
    ok(&["register", p(&a), p(&b), "--dissim-row", "--cache", p(&cache), "--flow-dump", p(&flows)]);
    let text = fs::read_to_string(&cache).unwrap();
    assert!(text.starts_with("source_id,target_id,D1,"));
    assert!(flows.join("flow.txt").exists());
    assert!(flows.join("closed_000_t4.rgs").exists());

    let stuck = run(&["register", p(&a), p(&data.join("gapped_000.rgs")), "--threshold-factor", "1e-6"]);
    assert_eq!(stuck.status.code(), Some(2));

    let missing = run(&["register", p(&a), p(&dir.path().join("nope.rgs"))]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_args = run(&["register", p(&a), p(&b), "--q", "0"]);
    assert_eq!(bad_args.status.code(), Some(1));
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let manifest = data.join("manifest.csv");
    let cache = dir.path().join("dissims.csv");
    let reference = dir.path().join("reference.json");
    let features = dir.path().join("features.csv");

    let pairs = dir.path().join("pairs.csv");
    fs::write(&pairs, "source_id,target_id\nclosed_000,gapped_000\ngapped_001,closed_002\n").unwrap();
    let out = ok(&["dissim-batch", "--manifest", p(&manifest), "--pairs", p(&pairs), "--cache", p(&cache)]);
    assert!(out.starts_with("2 pairs: 2 computed"), "{out}");
    let out = ok(&["dissim-batch", "--manifest", p(&manifest), "--pairs", p(&pairs), "--cache", p(&cache)]);
    assert!(out.starts_with("2 pairs: 0 computed"), "{out}");

    let out = ok(&[
        "features", "--manifest", p(&manifest), "--cache", p(&cache), "--reference", p(&reference),
        "--reference-size", "2", "--compute", "--out", p(&features),
    ]);
    assert!(out.starts_with("9 rows (9 complete) x 18 columns"), "{out}");
    assert!(reference.exists());

    let forest = dir.path().join("forest.txt");
    let out = ok(&["train", "--features", p(&features), "--out", p(&forest), "--trees", "30"]);
    assert!(out.starts_with("oob_accuracy "));
    let out = ok(&["importance", "--features", p(&features), "--forest", p(&forest), "--repeats", "3", "--permutations", "2"]);
    assert_eq!(out.lines().count(), 10);

    let out = ok(&[
        "histogram", "--manifest", p(&manifest), "--cache", p(&cache), "--pairs-per-group", "2", "--index", "1",
        "--bins", "3",
    ]);
    assert_eq!(out.lines().count(), 1 + 3 * 3);

    let enriched = dir.path().join("enriched");
    let out = ok(&["enrich", "--manifest", p(&manifest), "--out", p(&enriched), "--seed", "2"]);
    assert!(out.starts_with("9 -> "), "{out}");
    assert!(enriched.join("manifest.csv").exists());

    let bad = run(&["dissim-batch", "--manifest", p(&manifest), "--cache", p(&cache)]);
    assert_eq!(bad.status.code(), Some(1));
    let usage = run(&["train"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn pipeline_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let out = dir.path().join("run");
    fs::write(
        &config,
        r#"{
            "synth": {"n_closed": 6, "n_gapped": 4, "ring_size": 30, "ring_count": 6},
            "reference": {"size": 2},
            "forest": {"n_trees": 20},
            "restarts": 1,
            "importance": {"n_permutations": 2, "n_repeats": 2},
            "histogram": {"pairs_per_group": 2, "bins": 4}
        }"#,
    )
    .unwrap();
    let stdout = ok(&["pipeline", "--config", p(&config), "--out", p(&out), "--no-perturb"]);
    assert!(stdout.contains("restart 0 oob_accuracy"));
    for f in ["report.json", "features.csv", "oob.csv", "importance.csv", "histograms.csv", "medians.csv", "config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let bad = run(&["pipeline", "--config", p(&dir.path().join("missing.json"))]);
    assert_eq!(bad.status.code(), Some(1));
}
