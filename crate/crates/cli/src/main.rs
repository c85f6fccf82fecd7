use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use diffshape::dissim::{
    batch_dissims, format_record, histograms_to_csv, load_cache, pair_histograms, strain_dissims, DissimParams,
    DissimRecord, CACHE_HEADER, DISSIM_NAMES, N_DISSIM,
};
use diffshape::enrich::{rebalance, EnrichConfig};
use diffshape::features::{build_features, feature_pairs, select_reference, FeatureMatrix, ReferenceSet, SelectionRule, ALL, REDUCED};
use diffshape::forest::{group_importance, train_matrix, ForestConfig, ImportanceConfig, TrainedForest};
use diffshape::kernel::KernelConfig;
use diffshape::pipeline::{histogram_pairs, importance_to_csv, run_pipeline, HistogramConfig, PipelineConfig};
use diffshape::registration::{register, SolverKind, SolverOptions};
use diffshape::standardize::standardize;
use diffshape::surface::{load_manifest, load_surface, save_dataset, save_surface};
use diffshape::synth::{generate, SynthParams, CLOSED};
use diffshape::Error;

const WORKERS_ENV: &str = "DIFFSHAPE_WORKERS";

#[derive(Parser)]
#[command(name = "diffshape", version, about = "Diffeomorphic shape dissimilarities and random-forest classification")]
struct Cli {
    /// Worker threads; the DIFFSHAPE_WORKERS environment variable overrides this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic closed/gapped dataset.
    Gen(GenArgs),
    /// Register one surface onto another.
    Register(RegisterArgs),
    /// Dissimilarities for a list of pairs or against a reference set.
    DissimBatch(BatchArgs),
    /// Rebalance classes by interpolation and perturbation.
    Enrich(EnrichArgs),
    /// Build the feature matrix against a reference set.
    Features(FeaturesArgs),
    /// Train a random forest and report out-of-bag accuracy.
    Train(TrainArgs),
    /// Group permutation importance of a trained forest.
    Importance(ImportanceArgs),
    /// Per-group histograms of cached dissimilarities.
    Histogram(HistogramArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone)]
struct KernelArgs {
    /// Absolute deformation kernel width.
    #[arg(long)]
    sigma: Option<f64>,
    /// Absolute matching kernel width.
    #[arg(long)]
    tau: Option<f64>,
    /// Deformation kernel width relative to the pair's bounding-box diagonal.
    #[arg(long)]
    sigma_rel: Option<f64>,
    #[arg(long)]
    tau_rel: Option<f64>,
    /// Weight of the matching term.
    #[arg(long)]
    lambda: Option<f64>,
}

impl KernelArgs {
    fn apply(&self, k: &mut KernelConfig) {
        if self.sigma.is_some() {
            k.sigma = self.sigma;
        }
        if self.tau.is_some() {
            k.tau = self.tau;
        }
        k.sigma_rel = self.sigma_rel.unwrap_or(k.sigma_rel);
        k.tau_rel = self.tau_rel.unwrap_or(k.tau_rel);
        k.lambda = self.lambda.unwrap_or(k.lambda);
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// lbfgs or admm.
    #[arg(long)]
    solver: Option<SolverKind>,
    /// Number of time steps.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    cost_tol: Option<f64>,
    #[arg(long)]
    max_control_points: Option<usize>,
    #[arg(long)]
    max_target_points: Option<usize>,
    #[arg(long)]
    threshold_factor: Option<f64>,
}

impl SolverArgs {
    fn apply(&self, o: &mut SolverOptions) {
        o.solver = self.solver.unwrap_or(o.solver);
        o.q = self.q.unwrap_or(o.q);
        o.max_iterations = self.max_iterations.unwrap_or(o.max_iterations);
        o.cost_tol = self.cost_tol.unwrap_or(o.cost_tol);
        if self.max_control_points.is_some() {
            o.max_control_points = self.max_control_points;
        }
        if self.max_target_points.is_some() {
            o.max_target_points = self.max_target_points;
        }
        o.threshold_factor = self.threshold_factor.unwrap_or(o.threshold_factor);
    }
}

#[derive(Args, Clone)]
struct DissimArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Skip standardization of both surfaces.
    #[arg(long)]
    no_standardize: bool,
    /// Average both registration directions.
    #[arg(long)]
    symmetrize: bool,
}

impl DissimArgs {
    fn params(&self) -> DissimParams {
        let mut p = DissimParams::default();
        self.apply(&mut p);
        p
    }

    fn apply(&self, p: &mut DissimParams) {
        self.kernel.apply(&mut p.kernel);
        self.solver.apply(&mut p.solver);
        p.standardize = p.standardize && !self.no_standardize;
        p.symmetrize = p.symmetrize || self.symmetrize;
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_closed: Option<usize>,
    #[arg(long)]
    n_gapped: Option<usize>,
    #[arg(long)]
    ring_size: Option<usize>,
    #[arg(long)]
    ring_count: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    no_pose_jitter: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RegisterArgs {
    src: PathBuf,
    dst: PathBuf,
    #[command(flatten)]
    dissim: DissimArgs,
    /// Emit a dissimilarity cache row with all nine values instead of a
    /// registration row.
    #[arg(long)]
    dissim_row: bool,
    /// Append the row to this file instead of printing it.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Directory for the deformed surface at every time node and the flow
    /// coefficients.
    #[arg(long)]
    flow_dump: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// CSV of `source_id,target_id` pairs.
    #[arg(long, conflicts_with = "reference")]
    pairs: Option<PathBuf>,
    /// Reference set JSON; pairs every entry with every reference.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    dissim: DissimArgs,
}

#[derive(Args)]
struct EnrichArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_interpolate: bool,
    /// Add one perturbed copy of every entry.
    #[arg(long)]
    perturb: bool,
    #[arg(long)]
    t_star: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dissim: DissimArgs,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Reference set JSON; selected and written here if missing.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 20)]
    reference_size: usize,
    #[arg(long, default_value = CLOSED)]
    reference_label: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compute missing pairs instead of failing.
    #[arg(long)]
    compute: bool,
    /// Use only D1, D2 and D9.
    #[arg(long)]
    reduced_features: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    dissim: DissimArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    trees: usize,
    #[arg(long)]
    features_per_split: Option<usize>,
    #[arg(long, default_value_t = 0.002)]
    min_impurity_decrease: f64,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    subsample_fraction: f64,
    #[arg(long)]
    with_replacement: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    forest: PathBuf,
    #[arg(long, default_value_t = 100)]
    permutations: usize,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// 1-based dissimilarity index; all nine if unset.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Sample and compute this many original pairs per group first.
    #[arg(long)]
    pairs_per_group: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    dissim: DissimArgs,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_closed: Option<usize>,
    #[arg(long)]
    n_gapped: Option<usize>,
    #[arg(long)]
    reference_size: Option<usize>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    reduced_features: bool,
    #[arg(long)]
    no_perturb: bool,
    #[arg(long)]
    no_histogram: bool,
    #[arg(long)]
    importance_repeats: Option<usize>,
    #[command(flatten)]
    dissim: DissimArgs,
}

#[derive(Debug)]
enum Failure {
    /// Registration ran but did not converge.
    NotConverged,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Error(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn workers(flag: Option<usize>) -> usize {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()) {
        return n;
    }
    flag.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn cmd_gen(a: &GenArgs) -> Outcome {
    let d = SynthParams::default();
    let p = SynthParams {
        n_closed: a.n_closed.unwrap_or(d.n_closed),
        n_gapped: a.n_gapped.unwrap_or(d.n_gapped),
        ring_size: a.ring_size.unwrap_or(d.ring_size),
        ring_count: a.ring_count.unwrap_or(d.ring_count),
        noise: a.noise.unwrap_or(d.noise),
        pose_jitter: !a.no_pose_jitter,
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let ds = generate(&p)?;
    let manifest = save_dataset(&ds, &a.out)?;
    write_file(&a.out.join("synth.json"), &serde_json::to_string_pretty(&p).map_err(Error::from)?)?;
    println!("wrote {} surfaces, manifest {}", ds.len(), manifest.display());
    Ok(())
}

const REGISTRATION_HEADER: &str = "source_id,target_id,kin,terminal_mismatch,converged,iterations,wallclock_s";

fn append_row(cache: &Path, header: &str, row: &str) -> Outcome {
    if let Some(dir) = cache.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let fresh = fs::metadata(cache).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cache)
        .map_err(|e| io_err(cache, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| io_err(cache, e))?;
    }
    writeln!(f, "{row}").map_err(|e| io_err(cache, e))
}

fn cmd_register(a: &RegisterArgs) -> Outcome {
    let params = a.dissim.params();
    let (s, t) = (load_surface(&a.src)?, load_surface(&a.dst)?);
    let (s, t) = if params.standardize {
        (standardize(&s)?.surface, standardize(&t)?.surface)
    } else {
        (s, t)
    };
    let kp = params.kernel.resolve(s.points(), t.points())?;
    let t0 = Instant::now();
    let r = register(&s, &t, &kp, &params.solver)?;
    let wall = t0.elapsed().as_secs_f64();
    eprintln!(
        "kin {:.6e} mismatch {:.4e} threshold {:.4e} iterations {} converged {}",
        r.flow.kinetic_energy, r.flow.terminal_mismatch, r.threshold, r.iterations, r.converged
    );
    let (header, row) = if a.dissim_row {
        let q = strain_dissims(&s, &r.deformed)?;
        let mut d = [0.0; N_DISSIM];
        d[..8].copy_from_slice(&q);
        d[8] = r.flow.kinetic_energy.max(0.0).sqrt();
        let record = DissimRecord {
            source_id: s.id().to_string(),
            target_id: t.id().to_string(),
            d,
            kin: r.flow.kinetic_energy,
            converged: r.converged,
        };
        (CACHE_HEADER, format_record(&record))
    } else {
        let row = format!(
            "{},{},{},{},{},{},{wall}",
            s.id(),
            t.id(),
            r.flow.kinetic_energy,
            r.flow.terminal_mismatch,
            r.converged,
            r.iterations
        );
        (REGISTRATION_HEADER, row)
    };
    match &a.cache {
        Some(c) => append_row(c, header, &row)?,
        None => println!("{header}\n{row}"),
    }
    if let Some(dir) = &a.flow_dump {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for j in 0..=r.flow.q {
            let node = r.flow.deform_at(&s, j)?;
            save_surface(&node, dir.join(format!("{}_t{j}.rgs", s.id())))?;
        }
        write_file(&dir.join("flow.txt"), &r.flow.to_text())?;
    }
    if r.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("source_id") {
            continue;
        }
        match line.split_once(',') {
            Some((a, b)) => out.push((a.trim().to_string(), b.trim().to_string())),
            None => {
                return Err(Failure::Error(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected source_id,target_id".into(),
                }))
            }
        }
    }
    Ok(out)
}

fn read_reference(path: &Path) -> Result<ReferenceSet, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn cmd_batch(a: &BatchArgs, workers: usize) -> Outcome {
    let ds = load_manifest(&a.manifest)?;
    let pairs = match (&a.pairs, &a.reference) {
        (Some(p), _) => read_pairs(p)?,
        (None, Some(r)) => feature_pairs(&ds, &read_reference(r)?),
        (None, None) => {
            return Err(Failure::Error(Error::InvalidArgument("need --pairs or --reference".into())));
        }
    };
    let out = batch_dissims(&ds, &pairs, &a.dissim.params(), Some(&a.cache), workers)?;
    let unconverged = out.records.iter().filter(|r| !r.converged).count();
    println!(
        "{} pairs: {} computed, {} unconverged, {} failed",
        pairs.len(),
        out.executed,
        unconverged,
        out.failures.len()
    );
    for (s, t, e) in &out.failures {
        eprintln!("{s} -> {t}: {e}");
    }
    Ok(())
}

fn cmd_enrich(a: &EnrichArgs) -> Outcome {
    let ds = load_manifest(&a.manifest)?;
    let mut cfg = EnrichConfig {
        interpolate: !a.no_interpolate,
        perturb: a.perturb,
        seed: a.seed,
        ..Default::default()
    };
    a.dissim.kernel.apply(&mut cfg.interpolation.kernel);
    a.dissim.solver.apply(&mut cfg.interpolation.solver);
    cfg.interpolation.t_star = a.t_star.unwrap_or(cfg.interpolation.t_star);
    let (out, report) = rebalance(&ds, &cfg)?;
    save_dataset(&out, &a.out)?;
    write_file(&a.out.join("enrich_report.csv"), &report.to_csv())?;
    println!("{} -> {} entries", ds.len(), out.len());
    Ok(())
}

fn cmd_features(a: &FeaturesArgs, workers: usize) -> Outcome {
    let ds = load_manifest(&a.manifest)?;
    let reference = if a.reference.exists() {
        read_reference(&a.reference)?
    } else {
        let rule = SelectionRule::RandomFromClass {
            label: a.reference_label.clone(),
            originals_only: true,
        };
        let r = select_reference(&ds, rule, a.reference_size, a.seed)?;
        write_file(&a.reference, &serde_json::to_string_pretty(&r).map_err(Error::from)?)?;
        r
    };
    let records: Vec<DissimRecord> = if a.compute {
        batch_dissims(&ds, &feature_pairs(&ds, &reference), &a.dissim.params(), Some(&a.cache), workers)?.records
    } else {
        load_cache(&a.cache)?.into_values().collect()
    };
    let dissims: &[usize] = if a.reduced_features { &REDUCED } else { &ALL };
    let m = build_features(&ds, &reference, &records, dissims, false)?;
    m.save(&a.out)?;
    let complete = m.complete.iter().filter(|c| **c).count();
    println!("{} rows ({complete} complete) x {} columns", m.n_rows(), m.n_cols());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let m = FeatureMatrix::load(&a.features)?.complete_rows();
    let cfg = ForestConfig {
        n_trees: a.trees,
        subsample_fraction: a.subsample_fraction,
        subsample_with_replacement: a.with_replacement,
        features_per_split: a.features_per_split,
        min_impurity_decrease: a.min_impurity_decrease,
        class_weights: None,
        seed: a.seed,
    };
    let forest = train_matrix(&m, &cfg)?;
    write_file(&a.out, &forest.to_text())?;
    let oob = forest.oob_evaluate(&m.values, &m.labels)?;
    println!("oob_accuracy {:.4}", oob.accuracy);
    println!("confusion (rows: true {:?})", forest.classes);
    for row in &oob.confusion {
        println!("  {}", row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" "));
    }
    println!("excluded {} mean_oob_trees {:.2}", oob.excluded, oob.mean_oob_trees);
    Ok(())
}

fn cmd_importance(a: &ImportanceArgs) -> Outcome {
    let m = FeatureMatrix::load(&a.features)?.complete_rows();
    let text = fs::read_to_string(&a.forest).map_err(|e| io_err(&a.forest, e))?;
    let forest = TrainedForest::from_text(&text)?;
    let groups: Vec<(String, Vec<usize>)> = m
        .groups_by_dissim()
        .into_iter()
        .map(|(d, cols)| (DISSIM_NAMES[d - 1].to_string(), cols))
        .collect();
    let cfg = ImportanceConfig {
        n_permutations: a.permutations,
        n_repeats: a.repeats,
        seed: a.seed,
        identity: false,
    };
    let imp = group_importance(&forest, &m.values, &m.labels, &groups, &cfg)?;
    let csv = importance_to_csv(&imp);
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_histogram(a: &HistogramArgs, workers: usize) -> Outcome {
    let ds = load_manifest(&a.manifest)?;
    let h = HistogramConfig {
        bins: a.bins,
        ..Default::default()
    };
    let records: Vec<DissimRecord> = match a.pairs_per_group {
        Some(n) => {
            let hc = HistogramConfig {
                pairs_per_group: n,
                ..h.clone()
            };
            let pairs = histogram_pairs(&ds, &hc, a.seed);
            batch_dissims(&ds, &pairs, &a.dissim.params(), Some(&a.cache), workers)?.records
        }
        None => load_cache(&a.cache)?.into_values().collect(),
    };
    let mut records: Vec<DissimRecord> = records.into_iter().filter(|r| r.converged).collect();
    records.sort_by(|x, y| (&x.source_id, &x.target_id).cmp(&(&y.source_id, &y.target_id)));
    let labels: HashMap<String, String> = ds
        .entries
        .iter()
        .map(|e| (e.surface.id().to_string(), e.label.clone()))
        .collect();
    let indices: Vec<usize> = match a.index {
        Some(i) => vec![i],
        None => (1..=N_DISSIM).collect(),
    };
    let mut hs = Vec::new();
    for i in indices {
        hs.extend(pair_histograms(&records, &labels, &h.class_a, &h.class_b, i, h.bins)?);
    }
    let csv = histograms_to_csv(&hs);
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_pipeline(a: &PipelineArgs, workers: usize) -> Outcome {
    let mut c = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(o) = &a.out {
        c.output = o.clone();
    }
    if a.manifest.is_some() {
        c.manifest = a.manifest.clone();
    }
    if a.cache.is_some() {
        c.cache = a.cache.clone();
    }
    c.seed = a.seed.unwrap_or(c.seed);
    c.synth.n_closed = a.n_closed.unwrap_or(c.synth.n_closed);
    c.synth.n_gapped = a.n_gapped.unwrap_or(c.synth.n_gapped);
    c.reference.size = a.reference_size.unwrap_or(c.reference.size);
    c.forest.n_trees = a.trees.unwrap_or(c.forest.n_trees);
    c.restarts = a.restarts.unwrap_or(c.restarts);
    c.reduced_features |= a.reduced_features;
    if a.no_perturb {
        c.enrich.perturb = false;
    }
    if a.no_histogram {
        c.histogram = None;
    }
    c.importance.n_repeats = a.importance_repeats.unwrap_or(c.importance.n_repeats);
    a.dissim.apply(&mut c.dissim);
    a.dissim.kernel.apply(&mut c.enrich.interpolation.kernel);
    a.dissim.solver.apply(&mut c.enrich.interpolation.solver);
    c.workers = workers;
    let report = run_pipeline(&c)?;
    for r in &report.restarts {
        println!("restart {} oob_accuracy {:.4}", r.restart, r.oob.accuracy);
    }
    println!("importance:");
    for g in &report.importance {
        println!("  {:<16} {:.4}", g.group, g.importance);
    }
    println!("artifacts in {}", c.output.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let w = workers(cli.workers).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
        log::warn!("thread pool: {e}");
    }
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Register(a) => cmd_register(a),
        Command::DissimBatch(a) => cmd_batch(a, w),
        Command::Enrich(a) => cmd_enrich(a),
        Command::Features(a) => cmd_features(a, w),
        Command::Train(a) => cmd_train(a),
        Command::Importance(a) => cmd_importance(a),
        Command::Histogram(a) => cmd_histogram(a, w),
        Command::Pipeline(a) => cmd_pipeline(a, w),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotConverged) => {
            eprintln!("registration did not converge");
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
