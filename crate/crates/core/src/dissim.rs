//! The nine strongly invariant dissimilarities, the cached pair-batch
//! engine, and class-pair histograms.
//!
//! `D1..D4` are 95% strain quantiles over the last 80, 160, 240 and 800
//! points, `D5..D8` the matching medians, `D9 = sqrt(kin)`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{hilb_dissimilarity, KernelConfig};
use crate::registration::{register, SolverOptions};
use crate::standardize::standardize;
use crate::strain::{isotropic_strain, strain_quantile};
use crate::surface::{symmetric_trimmed_hausdorff, RingSurface, SurfaceDataset};

pub const TAIL_SIZES: [usize; 4] = [80, 160, 240, 800];
pub const HIGH_ALPHA: f64 = 0.95;
pub const MED_ALPHA: f64 = 0.5;
pub const N_DISSIM: usize = 9;

pub const DISSIM_NAMES: [&str; N_DISSIM] = [
    "highstrain_80",
    "highstrain_160",
    "highstrain_240",
    "highstrain_800",
    "medstrain_80",
    "medstrain_160",
    "medstrain_240",
    "medstrain_800",
    "sqrtkin",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DissimParams {
    pub kernel: KernelConfig,
    pub solver: SolverOptions,
    /// Replace both surfaces by their standardized versions first.
    pub standardize: bool,
    /// Average both registration directions.
    pub symmetrize: bool,
}

impl Default for DissimParams {
    fn default() -> Self {
        Self {
            kernel: KernelConfig::default(),
            solver: SolverOptions::default(),
            standardize: true,
            symmetrize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissimRecord {
    pub source_id: String,
    pub target_id: String,
    pub d: [f64; N_DISSIM],
    pub kin: f64,
    pub converged: bool,
}

struct Directional {
    quantiles: [f64; 8],
    kin: f64,
    converged: bool,
}

/// `D_1..D_8`: high and median strain quantiles over the last 80, 160,
/// 240 and 800 points of `source` deformed into `deformed`.
pub fn strain_dissims(source: &RingSurface, deformed: &RingSurface) -> Result<[f64; 8]> {
    let field = isotropic_strain(source, deformed)?;
    let mut quantiles = [0.0; 8];
    for (i, &k) in TAIL_SIZES.iter().enumerate() {
        // Short grids use every point.
        let k = k.min(field.len());
        quantiles[i] = strain_quantile(&field, HIGH_ALPHA, k)?;
        quantiles[4 + i] = strain_quantile(&field, MED_ALPHA, k)?;
    }
    Ok(quantiles)
}

fn one_direction(s: &RingSurface, t: &RingSurface, params: &DissimParams) -> Result<Directional> {
    let kp = params.kernel.resolve(s.points(), t.points())?;
    let r = register(s, t, &kp, &params.solver)?;
    Ok(Directional {
        quantiles: strain_dissims(s, &r.deformed)?,
        kin: r.flow.kinetic_energy,
        converged: r.converged,
    })
}

fn prepare(s: &RingSurface, params: &DissimParams) -> Result<RingSurface> {
    if params.standardize {
        Ok(standardize(s)?.surface)
    } else {
        Ok(s.clone())
    }
}

fn record_from(s: &RingSurface, t: &RingSurface, params: &DissimParams) -> Result<DissimRecord> {
    let f = one_direction(s, t, params)?;
    let (quantiles, kin, converged) = if params.symmetrize {
        let b = one_direction(t, s, params)?;
        let mut q = [0.0; 8];
        for (i, v) in q.iter_mut().enumerate() {
            *v = 0.5 * (f.quantiles[i] + b.quantiles[i]);
        }
        (q, 0.5 * (f.kin + b.kin), f.converged && b.converged)
    } else {
        (f.quantiles, f.kin, f.converged)
    };
    let mut d = [0.0; N_DISSIM];
    d[..8].copy_from_slice(&quantiles);
    d[8] = kin.max(0.0).sqrt();
    Ok(DissimRecord {
        source_id: s.id().to_string(),
        target_id: t.id().to_string(),
        d,
        kin,
        converged,
    })
}

/// All nine dissimilarities of the ordered pair `(s, t)`.
pub fn dissim_pair(s: &RingSurface, t: &RingSurface, params: &DissimParams) -> Result<DissimRecord> {
    record_from(&prepare(s, params)?, &prepare(t, params)?, params)
}

/// Symmetric trimmed Hausdorff distance between the standardized surfaces.
pub fn haus_plus(s: &RingSurface, t: &RingSurface, trim_fraction: f64) -> Result<f64> {
    let (a, b) = (standardize(s)?.surface, standardize(t)?.surface);
    symmetric_trimmed_hausdorff(a.points(), b.points(), trim_fraction)
}

/// Measure-matching dissimilarity between the standardized surfaces; the
/// scale comes from `kernel` resolved on the standardized pair.
pub fn hilb_plus(s: &RingSurface, t: &RingSurface, kernel: &KernelConfig) -> Result<f64> {
    let (a, b) = (standardize(s)?.surface, standardize(t)?.surface);
    let kp = kernel.resolve(a.points(), b.points())?;
    hilb_dissimilarity(a.points(), b.points(), kp.tau)
}

// ---------------------------------------------------------------------------
// Cache

pub const CACHE_HEADER: &str = "source_id,target_id,D1,D2,D3,D4,D5,D6,D7,D8,D9,kin,converged";

pub fn format_record(r: &DissimRecord) -> String {
    let mut s = format!("{},{}", r.source_id, r.target_id);
    for v in r.d {
        let _ = write!(s, ",{v}");
    }
    let _ = write!(s, ",{},{}", r.kin, r.converged);
    s
}

pub fn parse_record(line: &str) -> Option<DissimRecord> {
    let cols: Vec<&str> = line.trim().split(',').collect();
    if cols.len() != 4 + N_DISSIM {
        return None;
    }
    let mut d = [0.0; N_DISSIM];
    for (i, v) in d.iter_mut().enumerate() {
        *v = cols[2 + i].parse().ok()?;
    }
    Some(DissimRecord {
        source_id: cols[0].to_string(),
        target_id: cols[1].to_string(),
        d,
        kin: cols[2 + N_DISSIM].parse().ok()?,
        converged: cols[3 + N_DISSIM].parse().ok()?,
    })
}

/// Reads a cache file; later rows for the same pair replace earlier ones.
pub fn load_cache(path: &Path) -> Result<HashMap<(String, String), DissimRecord>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with("source_id,") {
            continue;
        }
        let r = parse_record(line).ok_or_else(|| Error::parse(path, i + 1, "malformed cache row"))?;
        out.insert((r.source_id.clone(), r.target_id.clone()), r);
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    /// One record per successfully evaluated pair, in request order.
    pub records: Vec<DissimRecord>,
    pub failures: Vec<(String, String, String)>,
    /// Registrations actually run (cache misses).
    pub executed: usize,
}

/// Evaluates `pairs` on `workers` threads. With a cache path, converged
/// cached pairs are reused and new results are appended as they finish.
pub fn batch_dissims(
    dataset: &SurfaceDataset,
    pairs: &[(String, String)],
    params: &DissimParams,
    cache: Option<&Path>,
    workers: usize,
) -> Result<BatchOutcome> {
    let index = dataset.index();
    for (a, b) in pairs {
        for id in [a, b] {
            if !index.contains_key(id.as_str()) {
                return Err(Error::UnknownId(id.clone()));
            }
        }
    }
    let cached = match cache {
        Some(p) => load_cache(p)?,
        None => HashMap::new(),
    };
    let todo: Vec<usize> = (0..pairs.len())
        .filter(|&i| !cached.get(&pairs[i]).is_some_and(|r| r.converged))
        .collect();

    let needed: HashSet<&str> = todo
        .iter()
        .flat_map(|&i| [pairs[i].0.as_str(), pairs[i].1.as_str()])
        .collect();
    let mut needed: Vec<&str> = needed.into_iter().collect();
    needed.sort_unstable();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let prepared: HashMap<&str, std::result::Result<RingSurface, String>> = pool.install(|| {
        needed
            .par_iter()
            .map(|&id| (id, prepare(&index[id].surface, params).map_err(|e| e.to_string())))
            .collect()
    });

    let appender = match cache {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let fresh = !p.exists() || fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if fresh {
                writeln!(f, "{CACHE_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            Some(Mutex::new(f))
        }
        None => None,
    };

    let fresh: Vec<(usize, std::result::Result<DissimRecord, String>)> = pool.install(|| {
        todo.par_iter()
            .map(|&i| {
                let (a, b) = &pairs[i];
                let t0 = Instant::now();
                let res = match (&prepared[a.as_str()], &prepared[b.as_str()]) {
                    (Ok(s), Ok(t)) => record_from(s, t, params).map_err(|e| e.to_string()),
                    (Err(e), _) | (_, Err(e)) => Err(e.clone()),
                };
                match &res {
                    Ok(r) => {
                        log::debug!("pair {a} -> {b}: {:.2}s", t0.elapsed().as_secs_f64());
                        if let (Some(m), Some(p)) = (&appender, cache) {
                            let mut f = m.lock().expect("cache lock");
                            if let Err(e) = writeln!(f, "{}", format_record(r)) {
                                log::warn!("cache append to {} failed: {e}", p.display());
                            }
                        }
                    }
                    Err(e) => log::warn!("pair {a} -> {b} failed: {e}"),
                }
                (i, res)
            })
            .collect()
    });

    let executed = fresh.len();
    let mut by_index: HashMap<usize, std::result::Result<DissimRecord, String>> = fresh.into_iter().collect();
    let mut out = BatchOutcome {
        executed,
        ..Default::default()
    };
    for (i, pair) in pairs.iter().enumerate() {
        match by_index.remove(&i) {
            Some(Ok(r)) => out.records.push(r),
            Some(Err(e)) => out.failures.push((pair.0.clone(), pair.1.clone(), e)),
            None => out.records.push(cached[pair].clone()),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Histograms

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairGroup {
    AA,
    BB,
    AB,
}

impl PairGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            PairGroup::AA => "AA",
            PairGroup::BB => "BB",
            PairGroup::AB => "AB",
        }
    }

    /// Group of a pair given the two class labels; `None` if either label
    /// is neither `a` nor `b`.
    pub fn of(la: &str, lb: &str, a: &str, b: &str) -> Option<Self> {
        match (la == a, la == b, lb == a, lb == b) {
            (true, _, true, _) => Some(PairGroup::AA),
            (_, true, _, true) => Some(PairGroup::BB),
            (true, _, _, true) | (_, true, true, _) => Some(PairGroup::AB),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramSummary {
    pub group: PairGroup,
    /// 1-based dissimilarity index.
    pub dissim_index: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Histograms of `D_index` per group on shared bin edges. `labels` maps
/// surface ids to class labels; `a` and `b` name the two classes.
pub fn pair_histograms(
    records: &[DissimRecord],
    labels: &HashMap<String, String>,
    a: &str,
    b: &str,
    dissim_index: usize,
    bins: usize,
) -> Result<Vec<HistogramSummary>> {
    if !(1..=N_DISSIM).contains(&dissim_index) || bins == 0 {
        return Err(Error::InvalidArgument(format!(
            "dissimilarity index {dissim_index} or bin count {bins} out of range"
        )));
    }
    let mut values: HashMap<PairGroup, Vec<f64>> = HashMap::new();
    for r in records {
        let (Some(la), Some(lb)) = (labels.get(&r.source_id), labels.get(&r.target_id)) else {
            return Err(Error::UnknownId(format!("{} / {}", r.source_id, r.target_id)));
        };
        if let Some(g) = PairGroup::of(la, lb, a, b) {
            values.entry(g).or_default().push(r.d[dissim_index - 1]);
        }
    }
    for g in [PairGroup::AA, PairGroup::BB, PairGroup::AB] {
        if values.get(&g).is_none_or(Vec::is_empty) {
            return Err(Error::Insufficient(format!("no records in group {}", g.as_str())));
        }
    }
    let all = values.values().flatten();
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = if hi > lo {
        (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
    } else {
        vec![lo, hi]
    };
    let nb = edges.len() - 1;
    let mut out = Vec::new();
    for g in [PairGroup::AA, PairGroup::BB, PairGroup::AB] {
        let mut counts = vec![0; nb];
        for &v in &values[&g] {
            let k = if hi > lo {
                (((v - lo) / (hi - lo) * nb as f64) as usize).min(nb - 1)
            } else {
                0
            };
            counts[k] += 1;
        }
        out.push(HistogramSummary {
            group: g,
            dissim_index,
            bin_edges: edges.clone(),
            counts,
        });
    }
    Ok(out)
}

/// `group,index,edge_lo,edge_hi,count` rows.
pub fn histograms_to_csv(hs: &[HistogramSummary]) -> String {
    let mut s = String::from("group,index,edge_lo,edge_hi,count\n");
    for h in hs {
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{c}",
                h.group.as_str(),
                h.dissim_index,
                h.bin_edges[i],
                h.bin_edges[i + 1]
            );
        }
    }
    s
}

/// Median by sorting; `None` for an empty slice.
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}
