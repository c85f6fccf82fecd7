//! Class rebalancing by diffeomorphic interpolation and random
//! diffeomorphic perturbation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{EigenBasis, FieldSpec, FIELD_DOMAIN_RADIUS};
use crate::kernel::KernelConfig;
use crate::registration::{register, SolverOptions};
use crate::seeds::derive_seed;
use crate::standardize::{center_of_mass, standardize};
use crate::surface::{
    surface_area, symmetric_trimmed_hausdorff, DatasetEntry, Point, Provenance, RingSurface, SurfaceDataset,
    DEFAULT_TRIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpolationParams {
    pub kernel: KernelConfig,
    pub solver: SolverOptions,
    pub t_star: f64,
    /// Pairs with a larger standardized trimmed Hausdorff distance are rejected.
    pub max_haus: Option<f64>,
    pub trim_fraction: f64,
}

impl Default for InterpolationParams {
    fn default() -> Self {
        Self {
            kernel: KernelConfig::default(),
            solver: SolverOptions::default(),
            t_star: 0.75,
            max_haus: None,
            trim_fraction: DEFAULT_TRIM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Interpolation {
    pub surface: RingSurface,
    pub node: usize,
    pub haus: f64,
    pub terminal_mismatch: f64,
}

/// `F_t(S'')` at the time node nearest `t_star` of the flow registering
/// the standardized `s` onto the standardized `sigma`. The result carries
/// `s`'s grid and lives in the standardized frame of `s`.
pub fn interpolate_pair(
    s: &RingSurface,
    sigma: &RingSurface,
    id: &str,
    params: &InterpolationParams,
) -> Result<Interpolation> {
    if !(0.0..=1.0).contains(&params.t_star) {
        return Err(Error::InvalidArgument(format!("t_star {} outside [0, 1]", params.t_star)));
    }
    let a = standardize(s)?.surface;
    let b = standardize(sigma)?.surface;
    let haus = symmetric_trimmed_hausdorff(a.points(), b.points(), params.trim_fraction)?;
    if let Some(max) = params.max_haus {
        if haus > max {
            return Err(Error::InvalidArgument(format!(
                "pair {} / {} too far apart: {haus:.4e} > {max:.4e}",
                s.id(),
                sigma.id()
            )));
        }
    }
    let kp = params.kernel.resolve(a.points(), b.points())?;
    let r = register(&a, &b, &kp, &params.solver)?;
    if !r.converged {
        return Err(Error::SolverFailure {
            iteration: r.iterations,
            reason: format!(
                "interpolation registration did not converge: mismatch {:.4e} > {:.4e}",
                r.flow.terminal_mismatch, r.threshold
            ),
            dump: String::new(),
        });
    }
    let q = r.flow.q;
    let node = ((params.t_star * q as f64).round() as usize).min(q);
    let surface = r.flow.deform_at(&a, node)?.with_id(id);
    Ok(Interpolation {
        surface,
        node,
        haus,
        terminal_mismatch: r.flow.terminal_mismatch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    /// Row-major affine drift matrix.
    pub affine: [[f64; 3]; 3],
    pub truncation: usize,
    pub scales: [f64; 3],
    pub delta: f64,
    pub steps: usize,
    /// Largest trimmed Hausdorff drift, measured on unit-area surfaces.
    pub max_drift: f64,
    /// Smallest accepted shortest-to-longest edge ratio.
    pub quality_floor: f64,
    /// Radius the surface is scaled to before integration.
    pub ball_radius: f64,
    pub trim_fraction: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            affine: [[0.0; 3]; 3],
            truncation: 25,
            scales: [1.0; 3],
            delta: 0.01,
            steps: 10,
            max_drift: 0.05,
            quality_floor: 0.1,
            ball_radius: 3.5,
            trim_fraction: DEFAULT_TRIM,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.delta > 0.0) || self.delta * self.steps as f64 > 1.0 + 1e-12 {
            return bad("need delta > 0 and delta * steps <= 1");
        }
        if !(self.max_drift > 0.0) || !(self.quality_floor > 0.0) {
            return bad("acceptance thresholds must be positive");
        }
        if !(self.ball_radius > 0.0 && self.ball_radius <= FIELD_DOMAIN_RADIUS) {
            return bad("ball radius must lie in (0, 4]");
        }
        if self.affine.iter().flatten().any(|v| !v.is_finite()) {
            return bad("affine matrix must be finite");
        }
        Ok(())
    }

    /// Parameters for one field realization drawn from `seed`.
    pub fn realize(&self, basis: &EigenBasis, seed: u64) -> Result<PerturbationParams> {
        Ok(PerturbationParams {
            affine: Matrix3::from_fn(|i, j| self.affine[i][j]),
            field: FieldSpec::with_basis(basis.clone(), self.truncation, self.scales, seed)?,
            delta: self.delta,
            steps: self.steps,
            max_drift: self.max_drift,
            quality_floor: self.quality_floor,
            ball_radius: self.ball_radius,
            trim_fraction: self.trim_fraction,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationParams {
    pub affine: Matrix3<f64>,
    pub field: FieldSpec,
    pub delta: f64,
    pub steps: usize,
    pub max_drift: f64,
    pub quality_floor: f64,
    pub ball_radius: f64,
    pub trim_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Drift,
    Quality,
    /// A trajectory left the field's domain.
    Domain,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::Drift => "drift",
            Rejection::Quality => "quality",
            Rejection::Domain => "domain",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Perturbation {
    /// Unit-area result, centered at the source's center of mass.
    pub surface: RingSurface,
    pub drift: f64,
    pub quality: f64,
    pub rejection: Option<Rejection>,
}

fn unit_area(s: &RingSurface, c: &Point) -> Result<RingSurface> {
    let area = surface_area(s);
    if !(area > 0.0) {
        return Err(Error::DegenerateGeometry(format!("surface {} has zero area", s.id())));
    }
    let k = 1.0 / area.sqrt();
    s.map_points(|p| c + (p - c) * k)
}

/// Integrates `y_{j+1} = y_j + delta V_{t_j}(y_j)` with
/// `V_t(x) = t L x + sqrt(t) W(x)` on the surface scaled into the field's
/// ball, then rescales to unit area.
pub fn perturb_surface(s: &RingSurface, params: &PerturbationParams) -> Result<Perturbation> {
    let c = center_of_mass(s.points());
    let rmax = s.points().iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    if !(rmax > 0.0) {
        return Err(Error::DegenerateGeometry(format!("surface {} is a single point", s.id())));
    }
    let k = params.ball_radius / rmax;
    let mut y: Vec<Point> = s.points().iter().map(|p| (p - c) * k).collect();
    let reference = unit_area(s, &c)?;
    let mut domain_exit = false;
    for j in 0..params.steps {
        let t = j as f64 * params.delta;
        let w = match params.field.sample_many(&y) {
            Ok(w) => w,
            Err(Error::FieldDomain { .. }) => {
                domain_exit = true;
                break;
            }
            Err(e) => return Err(e),
        };
        for (i, (p, wi)) in y.iter_mut().zip(&w).enumerate() {
            *p += params.delta * (t * (params.affine * *p) + t.sqrt() * wi);
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { node: i });
            }
        }
    }
    let moved = s.with_points(y.iter().map(|p| c + p).collect())?;
    let surface = unit_area(&moved, &c)?;
    let drift = symmetric_trimmed_hausdorff(reference.points(), surface.points(), params.trim_fraction)?;
    let quality = surface.min_triangle_quality();
    let rejection = if domain_exit {
        Some(Rejection::Domain)
    } else if drift > params.max_drift {
        Some(Rejection::Drift)
    } else if quality < params.quality_floor {
        Some(Rejection::Quality)
    } else {
        None
    };
    Ok(Perturbation {
        surface,
        drift,
        quality,
        rejection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrichConfig {
    /// Interpolate until each class reaches its target size.
    pub interpolate: bool,
    /// Target size per class; defaults to the largest class size.
    pub targets: Option<BTreeMap<String, usize>>,
    /// Quantile of same-class standardized Hausdorff distances below which
    /// pairs are eligible for interpolation.
    pub closeness_quantile: f64,
    pub interpolation: InterpolationParams,
    /// Add one perturbed copy of every entry after interpolation.
    pub perturb: bool,
    pub perturbation: PerturbationConfig,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self {
            interpolate: true,
            targets: None,
            closeness_quantile: 0.25,
            interpolation: InterpolationParams::default(),
            perturb: false,
            perturbation: PerturbationConfig::default(),
            max_attempts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub id: String,
    pub provenance: Provenance,
    pub parents: Vec<String>,
    pub accepted: bool,
    pub criterion: String,
    pub attempts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EnrichReport {
    pub rows: Vec<ReportRow>,
    /// Interpolation closeness threshold per class.
    pub thresholds: BTreeMap<String, f64>,
    /// Entries still missing per class after interpolation.
    pub shortfall: BTreeMap<String, usize>,
}

impl EnrichReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,provenance,parent_ids,accepted,criterion,attempts\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.id,
                r.provenance.as_str(),
                r.parents.join(";"),
                r.accepted,
                r.criterion.replace(',', ";"),
                r.attempts
            );
        }
        s
    }
}

/// Nearest-rank quantile of unsorted values.
fn nearest_rank(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((alpha * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

fn interpolate_class(
    dataset: &SurfaceDataset,
    label: &str,
    deficit: usize,
    config: &EnrichConfig,
    report: &mut EnrichReport,
) -> Result<Vec<DatasetEntry>> {
    let members: Vec<&DatasetEntry> = dataset
        .class_members(label)
        .into_iter()
        .filter(|e| e.provenance == Provenance::Original)
        .collect();
    if members.len() < 2 {
        return Err(Error::Insufficient(format!("class {label} has fewer than two originals")));
    }
    let trim = config.interpolation.trim_fraction;
    let standardized: Vec<RingSurface> = members
        .par_iter()
        .map(|e| standardize(&e.surface).map(|s| s.surface))
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..members.len())
        .flat_map(|i| (i + 1..members.len()).map(move |j| (i, j)))
        .collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| symmetric_trimmed_hausdorff(standardized[i].points(), standardized[j].points(), trim))
        .collect::<Result<_>>()?;
    let threshold = nearest_rank(&dists, config.closeness_quantile);
    report.thresholds.insert(label.to_string(), threshold);
    let mut ranked: Vec<usize> = (0..pairs.len()).filter(|&k| dists[k] <= threshold).collect();
    ranked.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));

    let mut params = config.interpolation.clone();
    params.max_haus = Some(threshold);
    let mut added = Vec::new();
    let mut cursor = 0;
    while added.len() < deficit && cursor < ranked.len() {
        let batch: Vec<usize> = ranked[cursor..(cursor + deficit - added.len()).min(ranked.len())].to_vec();
        cursor += batch.len();
        let results: Vec<(usize, Result<Interpolation>)> = batch
            .par_iter()
            .map(|&k| {
                let (i, j) = pairs[k];
                let (a, b) = (&members[i].surface, &members[j].surface);
                let id = format!("interp_{}_{}", a.id(), b.id());
                (k, interpolate_pair(a, b, &id, &params))
            })
            .collect();
        for (k, res) in results {
            let (i, j) = pairs[k];
            let parents = vec![members[i].surface.id().to_string(), members[j].surface.id().to_string()];
            let id = format!("interp_{}_{}", parents[0], parents[1]);
            match res {
                Ok(interp) => {
                    report.rows.push(ReportRow {
                        id,
                        provenance: Provenance::Interpolated,
                        parents: parents.clone(),
                        accepted: true,
                        criterion: format!("haus_plus={:.4e} node={}", interp.haus, interp.node),
                        attempts: 1,
                    });
                    added.push(DatasetEntry {
                        surface: interp.surface,
                        label: label.to_string(),
                        provenance: Provenance::Interpolated,
                        parents,
                    });
                }
                Err(e) => {
                    log::warn!("interpolation {id} rejected: {e}");
                    report.rows.push(ReportRow {
                        id,
                        provenance: Provenance::Interpolated,
                        parents,
                        accepted: false,
                        criterion: e.to_string(),
                        attempts: 1,
                    });
                }
            }
        }
    }
    Ok(added)
}

/// One perturbed copy of `entry`, retrying with fresh seeds.
fn perturb_entry(
    entry: &DatasetEntry,
    config: &EnrichConfig,
    basis: &EigenBasis,
) -> Result<(Option<DatasetEntry>, ReportRow)> {
    let id = format!("{}_pert", entry.surface.id());
    let mut last = String::new();
    for attempt in 1..=config.max_attempts.max(1) {
        let seed = derive_seed(config.seed, entry.surface.id(), &format!("perturb/{attempt}"));
        let params = config.perturbation.realize(basis, seed)?;
        let p = perturb_surface(&entry.surface, &params)?;
        match p.rejection {
            None => {
                let row = ReportRow {
                    id: id.clone(),
                    provenance: Provenance::Perturbed,
                    parents: vec![entry.surface.id().to_string()],
                    accepted: true,
                    criterion: format!("drift={:.4e} quality={:.3}", p.drift, p.quality),
                    attempts: attempt,
                };
                let e = DatasetEntry {
                    surface: p.surface.with_id(id),
                    label: entry.label.clone(),
                    provenance: Provenance::Perturbed,
                    parents: row.parents.clone(),
                };
                return Ok((Some(e), row));
            }
            Some(r) => last = r.as_str().to_string(),
        }
    }
    Ok((
        None,
        ReportRow {
            id,
            provenance: Provenance::Perturbed,
            parents: vec![entry.surface.id().to_string()],
            accepted: false,
            criterion: last,
            attempts: config.max_attempts.max(1),
        },
    ))
}

/// Interpolation toward the class targets, then one perturbation per entry
/// if requested. Original entries are copied unchanged.
pub fn rebalance(dataset: &SurfaceDataset, config: &EnrichConfig) -> Result<(SurfaceDataset, EnrichReport)> {
    if !(0.0..=1.0).contains(&config.closeness_quantile) || config.closeness_quantile == 0.0 {
        return Err(Error::InvalidArgument("closeness quantile must lie in (0, 1]".into()));
    }
    let mut report = EnrichReport::default();
    let mut out = dataset.clone();
    let labels = dataset.labels();
    let largest = labels.iter().map(|l| dataset.class_members(l).len()).max().unwrap_or(0);
    if config.interpolate {
        for label in &labels {
            let have = dataset.class_members(label).len();
            let target = config
                .targets
                .as_ref()
                .and_then(|t| t.get(label).copied())
                .unwrap_or(largest);
            if have >= target {
                continue;
            }
            let deficit = target - have;
            let added = interpolate_class(dataset, label, deficit, config, &mut report)?;
            if added.len() < deficit {
                log::warn!("class {label}: only {} of {deficit} interpolations accepted", added.len());
                report.shortfall.insert(label.clone(), deficit - added.len());
            }
            for e in added {
                out.push(e)?;
            }
        }
    }
    if config.perturb {
        config.perturbation.validate()?;
        let basis = EigenBasis::validated(config.perturbation.truncation);
        let results: Vec<(Option<DatasetEntry>, ReportRow)> = out
            .entries
            .par_iter()
            .map(|e| perturb_entry(e, config, &basis))
            .collect::<Result<_>>()?;
        for (entry, row) in results {
            if let Some(e) = entry {
                out.push(e)?;
            }
            report.rows.push(row);
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthParams};

    fn small() -> SurfaceDataset {
        generate(&SynthParams {
            n_closed: 4,
            n_gapped: 3,
            ring_size: 24,
            ring_count: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_step_and_zero_field_are_rescalings() {
        let ds = small();
        let s = &ds.entries[0].surface;
        let basis = EigenBasis::validated(10);
        let cfg = PerturbationConfig {
            truncation: 10,
            steps: 0,
            ..Default::default()
        };
        let c = center_of_mass(s.points());
        let expect = unit_area(s, &c).unwrap();
        let p = perturb_surface(s, &cfg.realize(&basis, 1).unwrap()).unwrap();
        for (a, b) in p.surface.points().iter().zip(expect.points()) {
            assert!((a - b).norm() < 1e-12);
        }
        let mut zero = PerturbationConfig { truncation: 10, ..Default::default() }.realize(&basis, 1).unwrap();
        zero.field = zero.field.zeroed();
        let p = perturb_surface(s, &zero).unwrap();
        assert!(p.drift < 1e-12 && p.rejection.is_none());
        assert!((surface_area(&p.surface) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(PerturbationConfig { delta: 0.2, steps: 10, ..Default::default() }.validate().is_err());
        assert!(PerturbationConfig { ball_radius: 5.0, ..Default::default() }.validate().is_err());
        assert!(PerturbationConfig::default().validate().is_ok());
    }

    #[test]
    fn balanced_dataset_without_perturbation_is_unchanged() {
        let ds = generate(&SynthParams {
            n_closed: 3,
            n_gapped: 3,
            ring_size: 12,
            ring_count: 4,
            ..Default::default()
        })
        .unwrap();
        let (out, report) = rebalance(&ds, &EnrichConfig::default()).unwrap();
        assert_eq!(out, ds);
        assert!(report.rows.is_empty());
    }

    #[test]
    fn report_csv_layout() {
        let r = EnrichReport {
            rows: vec![ReportRow {
                id: "x_pert".into(),
                provenance: Provenance::Perturbed,
                parents: vec!["x".into()],
                accepted: false,
                criterion: "drift".into(),
                attempts: 5,
            }],
            ..Default::default()
        };
        assert_eq!(r.to_csv().lines().nth(1), Some("x_pert,perturbed,x,false,drift,5"));
    }
}
