//! End-to-end run: dataset, enrichment, dissimilarities against a reference
//! set, features, forest restarts, histograms and group importance.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dissim::{
    batch_dissims, histograms_to_csv, median, pair_histograms, DissimParams, DissimRecord, HistogramSummary,
    PairGroup, DISSIM_NAMES, N_DISSIM,
};
use crate::enrich::{rebalance, EnrichConfig, EnrichReport};
use crate::error::{Error, Result};
use crate::features::{build_features, feature_pairs, select_reference, FeatureMatrix, ReferenceSet, SelectionRule, ALL, REDUCED};
use crate::forest::{group_importance, train_matrix, GroupImportance, ImportanceConfig, OobReport, ForestConfig};
use crate::seeds::{derive_seed, rng_for};
use crate::surface::{load_manifest, save_dataset, Provenance, SurfaceDataset};
use crate::synth::{generate, SynthParams, CLOSED, GAPPED};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub size: usize,
    pub label: String,
    pub originals_only: bool,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            size: 20,
            label: CLOSED.into(),
            originals_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramConfig {
    /// Sampled original pairs per group.
    pub pairs_per_group: usize,
    pub bins: usize,
    pub class_a: String,
    pub class_b: String,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            pairs_per_group: 40,
            bins: 20,
            class_a: CLOSED.into(),
            class_b: GAPPED.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Load this manifest instead of generating a synthetic dataset.
    pub manifest: Option<PathBuf>,
    pub synth: SynthParams,
    pub output: PathBuf,
    /// Dissimilarity cache; `<output>/dissims.csv` if unset.
    pub cache: Option<PathBuf>,
    pub dissim: DissimParams,
    pub enrich: EnrichConfig,
    pub reference: ReferenceConfig,
    /// Use only D1, D2 and D9.
    pub reduced_features: bool,
    pub forest: ForestConfig,
    pub restarts: usize,
    pub importance: ImportanceConfig,
    pub histogram: Option<HistogramConfig>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SynthParams::default(),
            output: PathBuf::from("run"),
            cache: None,
            dissim: DissimParams::default(),
            enrich: EnrichConfig {
                perturb: true,
                ..Default::default()
            },
            reference: ReferenceConfig::default(),
            reduced_features: false,
            forest: ForestConfig {
                n_trees: 100,
                ..Default::default()
            },
            restarts: 5,
            importance: ImportanceConfig::default(),
            histogram: Some(HistogramConfig::default()),
            seed: 1,
            workers: 1,
        }
    }
}

impl PipelineConfig {
    /// Stage seeds derived from the master seed.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        for stage in ["synth", "enrich", "reference", "importance", "histogram"] {
            s.insert(stage.to_string(), derive_seed(self.seed, "pipeline", stage));
        }
        for l in 0..self.restarts {
            s.insert(format!("forest/{l}"), derive_seed(self.seed, "pipeline", &format!("forest/{l}")));
        }
        s
    }

    /// Copy with every stage seed filled in from the master seed.
    pub fn resolved(&self) -> Self {
        let seeds = self.seeds();
        let mut c = self.clone();
        c.synth.seed = seeds["synth"];
        c.enrich.seed = seeds["enrich"];
        c.importance.seed = seeds["importance"];
        c
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.output.join("dissims.csv"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartReport {
    pub restart: usize,
    pub seed: u64,
    pub oob: OobReport,
    pub importance: Vec<GroupImportance>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub class_counts: BTreeMap<String, usize>,
    pub reference: ReferenceSet,
    pub feature_rows: usize,
    pub feature_cols: usize,
    pub dropped_rows: usize,
    pub failed_pairs: usize,
    pub restarts: Vec<RestartReport>,
    /// Mean over restarts, sorted descending.
    pub importance: Vec<GroupImportance>,
    /// `(group, dissimilarity index, median)` over the histogram pairs.
    pub medians: Vec<(PairGroup, usize, f64)>,
    pub histograms: Vec<HistogramSummary>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn class_counts(ds: &SurfaceDataset) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for e in &ds.entries {
        *m.entry(e.label.clone()).or_insert(0) += 1;
    }
    m
}

/// Ordered original pairs sampled per group: AA and BB within classes,
/// AB with the source in class `b` and the target in class `a`.
pub fn histogram_pairs(ds: &SurfaceDataset, cfg: &HistogramConfig, seed: u64) -> Vec<(String, String)> {
    let ids = |l: &str| -> Vec<String> {
        ds.entries
            .iter()
            .filter(|e| e.label == l && e.provenance == Provenance::Original)
            .map(|e| e.surface.id().to_string())
            .collect()
    };
    let (a, b) = (ids(&cfg.class_a), ids(&cfg.class_b));
    let mut out = Vec::new();
    for (tag, src, dst) in [("AA", &a, &a), ("BB", &b, &b), ("AB", &b, &a)] {
        let all: Vec<(usize, usize)> = (0..src.len())
            .flat_map(|i| (0..dst.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| tag == "AB" || i != j)
            .collect();
        if all.is_empty() {
            continue;
        }
        let mut rng = rng_for(seed, tag, "histogram");
        let mut pick = sample(&mut rng, all.len(), cfg.pairs_per_group.min(all.len())).into_vec();
        pick.sort_unstable();
        out.extend(pick.into_iter().map(|k| (src[all[k].0].clone(), dst[all[k].1].clone())));
    }
    out
}

fn dissim_groups(m: &FeatureMatrix) -> Vec<(String, Vec<usize>)> {
    m.groups_by_dissim()
        .into_iter()
        .map(|(d, cols)| (DISSIM_NAMES[d - 1].to_string(), cols))
        .collect()
}

fn mean_importance(restarts: &[RestartReport]) -> Vec<GroupImportance> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in restarts {
        for g in &r.importance {
            acc.entry(g.group.clone()).or_default().push(g.importance);
        }
    }
    let mut out: Vec<GroupImportance> = acc
        .into_iter()
        .map(|(group, v)| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            GroupImportance {
                group,
                importance: m,
                std_dev: sd,
            }
        })
        .collect();
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.group.cmp(&b.group)));
    out
}

pub fn importance_to_csv(imp: &[GroupImportance]) -> String {
    let mut s = String::from("group,importance,std_dev\n");
    for g in imp {
        let _ = writeln!(s, "{},{},{}", g.group, g.importance, g.std_dev);
    }
    s
}

fn oob_to_csv(restarts: &[RestartReport]) -> String {
    let mut s = String::from("restart,seed,oob_accuracy,evaluated,excluded,mean_oob_trees\n");
    for r in restarts {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.restart, r.seed, r.oob.accuracy, r.oob.evaluated, r.oob.excluded, r.oob.mean_oob_trees
        );
    }
    s
}

pub fn medians_of(records: &[DissimRecord], labels: &HashMap<String, String>, a: &str, b: &str) -> Vec<(PairGroup, usize, f64)> {
    let mut out = Vec::new();
    for g in [PairGroup::AA, PairGroup::BB, PairGroup::AB] {
        for i in 1..=N_DISSIM {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| {
                    let (la, lb) = (labels.get(&r.source_id), labels.get(&r.target_id));
                    matches!((la, lb), (Some(x), Some(y)) if PairGroup::of(x, y, a, b) == Some(g))
                })
                .map(|r| r.d[i - 1])
                .collect();
            if let Some(m) = median(&v) {
                out.push((g, i, m));
            }
        }
    }
    out
}

/// Runs every stage, writing artifacts under `config.output`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    let config = config.resolved();
    let seeds = config.seeds();
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let meta = serde_json::json!({ "version": VERSION, "config": config, "seeds": seeds });
    write(&out.join("config.json"), &serde_json::to_string_pretty(&meta)?)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    pool.install(|| {
        let base = stage(
            "load",
            match &config.manifest {
                Some(m) => load_manifest(m),
                None => generate(&config.synth),
            },
        )?;
        log::info!("dataset: {:?}", class_counts(&base));

        let (dataset, enrich_report) = if config.enrich.interpolate || config.enrich.perturb {
            stage("enrich", rebalance(&base, &config.enrich))?
        } else {
            (base.clone(), EnrichReport::default())
        };
        write(&out.join("enrich_report.csv"), &enrich_report.to_csv())?;
        stage("enrich", save_dataset(&dataset, out.join("dataset")))?;
        log::info!("enriched: {:?}", class_counts(&dataset));

        let rule = SelectionRule::RandomFromClass {
            label: config.reference.label.clone(),
            originals_only: config.reference.originals_only,
        };
        let reference = stage(
            "reference",
            select_reference(&dataset, rule, config.reference.size, seeds["reference"]),
        )?;
        write(&out.join("reference.json"), &serde_json::to_string_pretty(&reference)?)?;

        let cache = config.cache_path();
        let pairs = feature_pairs(&dataset, &reference);
        let batch = stage(
            "dissim",
            batch_dissims(&dataset, &pairs, &config.dissim, Some(&cache), config.workers),
        )?;
        let mut failures = String::from("source_id,target_id,error\n");
        for (a, b, e) in &batch.failures {
            let _ = writeln!(failures, "{a},{b},{}", e.replace(['\n', ','], " "));
        }
        write(&out.join("failures.csv"), &failures)?;

        let dissims: &[usize] = if config.reduced_features { &REDUCED } else { &ALL };
        let full = stage("features", build_features(&dataset, &reference, &batch.records, dissims, false))?;
        full.save(&out.join("features.csv"))?;
        let features = full.complete_rows();
        let dropped = full.n_rows() - features.n_rows();
        let groups = dissim_groups(&features);

        let mut restarts = Vec::new();
        for l in 0..config.restarts {
            let seed = seeds[&format!("forest/{l}")];
            let fc = ForestConfig {
                seed,
                ..config.forest.clone()
            };
            let forest = stage("train", train_matrix(&features, &fc))?;
            write(&out.join(format!("forest_{l}.txt")), &forest.to_text())?;
            let oob = stage("train", forest.oob_evaluate(&features.values, &features.labels))?;
            let ic = ImportanceConfig {
                seed: derive_seed(config.importance.seed, "restart", &l.to_string()),
                ..config.importance.clone()
            };
            let importance = stage(
                "importance",
                group_importance(&forest, &features.values, &features.labels, &groups, &ic),
            )?;
            log::info!("restart {l}: oob accuracy {:.4}", oob.accuracy);
            restarts.push(RestartReport {
                restart: l,
                seed,
                oob,
                importance,
            });
        }
        write(&out.join("oob.csv"), &oob_to_csv(&restarts))?;
        let importance = mean_importance(&restarts);
        write(&out.join("importance.csv"), &importance_to_csv(&importance))?;

        let (mut histograms, mut medians) = (Vec::new(), Vec::new());
        if let Some(h) = &config.histogram {
            let hp = histogram_pairs(&base, h, seeds["histogram"]);
            let hb = stage("histogram", batch_dissims(&base, &hp, &config.dissim, Some(&cache), config.workers))?;
            let labels: HashMap<String, String> = base
                .entries
                .iter()
                .map(|e| (e.surface.id().to_string(), e.label.clone()))
                .collect();
            let converged: Vec<DissimRecord> = hb.records.into_iter().filter(|r| r.converged).collect();
            for i in 1..=N_DISSIM {
                histograms.extend(stage(
                    "histogram",
                    pair_histograms(&converged, &labels, &h.class_a, &h.class_b, i, h.bins),
                )?);
            }
            medians = medians_of(&converged, &labels, &h.class_a, &h.class_b);
            write(&out.join("histograms.csv"), &histograms_to_csv(&histograms))?;
            let mut s = String::from("group,index,median\n");
            for (g, i, m) in &medians {
                let _ = writeln!(s, "{},{i},{m}", g.as_str());
            }
            write(&out.join("medians.csv"), &s)?;
        }

        let report = PipelineReport {
            class_counts: class_counts(&dataset),
            reference,
            feature_rows: features.n_rows(),
            feature_cols: features.n_cols(),
            dropped_rows: dropped,
            failed_pairs: batch.failures.len(),
            restarts,
            importance,
            medians,
            histograms,
        };
        write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    })
}
