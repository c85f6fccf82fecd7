//! Ring-structured triangulated surfaces, the RGS text format, areas and
//! Hausdorff-type distances.
//!
//! Points are stored ring by ring. The last ring is the one nearest the
//! distinguished boundary curve, so "the last `k` points" of a surface are the
//! points closest to that curve.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;
pub type Triangle = [usize; 3];

/// Relative area below which a triangle counts as degenerate
/// (multiplied by the squared bounding-box diagonal).
pub const DEGENERATE_AREA_REL: f64 = 1e-12;

/// Default fraction of min-distances discarded by [`trimmed_hausdorff`].
pub const DEFAULT_TRIM: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RingSurface {
    id: String,
    points: Vec<Point>,
    ring_size: usize,
    ring_count: usize,
    triangles: Vec<Triangle>,
}

impl RingSurface {
    /// Builds and validates a surface. When `triangles` is `None` the
    /// triangulation is generated with [`triangulate_rings`].
    pub fn new(
        id: impl Into<String>,
        points: Vec<Point>,
        ring_size: usize,
        ring_count: usize,
        triangles: Option<Vec<Triangle>>,
    ) -> Result<Self> {
        if ring_size == 0 || ring_count == 0 {
            return Err(Error::InvalidSurface(
                "ring_size and ring_count must be positive".into(),
            ));
        }
        if points.len() != ring_size * ring_count {
            return Err(Error::InvalidSurface(format!(
                "{} points but ring_size * ring_count = {}",
                points.len(),
                ring_size * ring_count
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidSurface(format!("point {i} is not finite")));
        }
        let triangles = match triangles {
            Some(t) => t,
            None => ring_strip_triangles(ring_size, ring_count)?,
        };
        let n = points.len();
        if let Some((t, tri)) = triangles
            .iter()
            .enumerate()
            .find(|(_, tri)| tri.iter().any(|&i| i >= n))
        {
            return Err(Error::InvalidSurface(format!(
                "triangle {t} {tri:?} references a point index >= {n}"
            )));
        }
        let surface = Self {
            id: id.into(),
            points,
            ring_size,
            ring_count,
            triangles,
        };
        surface.check_degenerate()?;
        Ok(surface)
    }

    fn check_degenerate(&self) -> Result<()> {
        let diag2 = bounding_box_diagonal(&self.points).powi(2);
        let floor = DEGENERATE_AREA_REL * diag2;
        for (t, tri) in self.triangles.iter().enumerate() {
            let area = triangle_area(&self.points, tri);
            if area <= floor {
                return Err(Error::DegenerateGeometry(format!(
                    "triangle {t} {tri:?} of surface {} has area {area:e}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn ring_size(&self) -> usize {
        self.ring_size
    }

    pub fn ring_count(&self) -> usize {
        self.ring_count
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Same connectivity, new coordinates. Only finiteness is checked: a
    /// deformed copy may legitimately have thin triangles.
    pub fn with_points(&self, points: Vec<Point>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::InvalidSurface(format!(
                "expected {} points, got {}",
                self.points.len(),
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidSurface(format!("point {i} is not finite")));
        }
        Ok(Self {
            id: self.id.clone(),
            points,
            ring_size: self.ring_size,
            ring_count: self.ring_count,
            triangles: self.triangles.clone(),
        })
    }

    /// Applies `f` to every point.
    pub fn map_points(&self, f: impl Fn(&Point) -> Point) -> Result<Self> {
        self.with_points(self.points.iter().map(f).collect())
    }

    /// Lengths of all distinct triangulation edges, in first-seen order.
    pub fn edge_lengths(&self) -> Vec<f64> {
        unique_edges(&self.triangles)
            .into_iter()
            .map(|(i, j)| (self.points[i] - self.points[j]).norm())
            .collect()
    }

    /// Median edge length: the discretization mesh size.
    pub fn mesh_size(&self) -> f64 {
        let mut lengths = self.edge_lengths();
        if lengths.is_empty() {
            return 0.0;
        }
        lengths.sort_by(f64::total_cmp);
        let n = lengths.len();
        if n % 2 == 1 {
            lengths[n / 2]
        } else {
            0.5 * (lengths[n / 2 - 1] + lengths[n / 2])
        }
    }

    /// Smallest shortest-to-longest edge ratio over all triangles.
    pub fn min_triangle_quality(&self) -> f64 {
        self.triangles
            .iter()
            .map(|tri| triangle_quality(&self.points, tri))
            .fold(f64::INFINITY, f64::min)
    }
}

fn unique_edges(triangles: &[Triangle]) -> Vec<(usize, usize)> {
    let mut seen = std::collections::HashSet::new();
    let mut edges = Vec::new();
    for tri in triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let e = (a.min(b), a.max(b));
            if seen.insert(e) {
                edges.push(e);
            }
        }
    }
    edges
}

pub fn triangle_area(points: &[Point], tri: &Triangle) -> f64 {
    let (a, b, c) = (points[tri[0]], points[tri[1]], points[tri[2]]);
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn triangle_quality(points: &[Point], tri: &Triangle) -> f64 {
    let l = [
        (points[tri[0]] - points[tri[1]]).norm(),
        (points[tri[1]] - points[tri[2]]).norm(),
        (points[tri[2]] - points[tri[0]]).norm(),
    ];
    let lo = l.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = l.iter().copied().fold(0.0, f64::max);
    if hi > 0.0 {
        lo / hi
    } else {
        0.0
    }
}

pub fn bounding_box_diagonal(points: &[Point]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Ring-strip triangulation: for consecutive rings `k`, `k+1` each quad
/// `(k,i) (k,i+1) (k+1,i) (k+1,i+1)` (indices mod `ring_size` within a ring)
/// is split along the `(k,i)-(k+1,i+1)` diagonal.
pub fn triangulate_rings(surface: &RingSurface) -> Result<Vec<Triangle>> {
    ring_strip_triangles(surface.ring_size, surface.ring_count)
}

pub(crate) fn ring_strip_triangles(ring_size: usize, ring_count: usize) -> Result<Vec<Triangle>> {
    if ring_count < 2 {
        return Err(Error::InvalidSurface(format!(
            "ring-strip triangulation needs at least two rings, got {ring_count}"
        )));
    }
    if ring_size < 3 {
        return Err(Error::InvalidSurface(format!(
            "ring-strip triangulation needs rings of at least 3 points, got {ring_size}"
        )));
    }
    let idx = |k: usize, i: usize| k * ring_size + i % ring_size;
    let mut tris = Vec::with_capacity(2 * ring_size * (ring_count - 1));
    for k in 0..ring_count - 1 {
        for i in 0..ring_size {
            let p00 = idx(k, i);
            let p01 = idx(k, i + 1);
            let p10 = idx(k + 1, i);
            let p11 = idx(k + 1, i + 1);
            tris.push([p00, p01, p11]);
            tris.push([p00, p11, p10]);
        }
    }
    Ok(tris)
}

pub fn surface_area(surface: &RingSurface) -> f64 {
    surface
        .triangles
        .iter()
        .map(|tri| triangle_area(&surface.points, tri))
        .sum()
}

/// One-sided Hausdorff distance `max_{a in A} min_{b in B} |a - b|`.
pub fn hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    // Early-break max-min: once a point of A is closer than the running max
    // to some point of B it cannot raise the max.
    let mut cmax2 = 0.0f64;
    for p in a {
        let mut cmin2 = f64::INFINITY;
        for q in b {
            let d2 = (p - q).norm_squared();
            if d2 < cmin2 {
                cmin2 = d2;
                if cmin2 <= cmax2 {
                    break;
                }
            }
        }
        if cmin2 > cmax2 {
            cmax2 = cmin2;
        }
    }
    Ok(cmax2.sqrt())
}

pub fn symmetric_hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    Ok(hausdorff(a, b)?.max(hausdorff(b, a)?))
}

/// Minimum distance from each point of `a` to the set `b`.
pub fn min_distances(a: &[Point], b: &[Point]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Censored one-sided Hausdorff distance: the largest `floor(trim * |A|)`
/// min-distances are discarded before taking the max.
pub fn trimmed_hausdorff(a: &[Point], b: &[Point], trim_fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&trim_fraction) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {trim_fraction} outside [0, 1)"
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    if trim_fraction == 0.0 {
        return hausdorff(a, b);
    }
    let mut d = min_distances(a, b);
    let drop = ((trim_fraction * d.len() as f64).floor() as usize).min(d.len() - 1);
    let keep = d.len() - drop;
    let (_, kth, _) = d.select_nth_unstable_by(keep - 1, f64::total_cmp);
    Ok(*kth)
}

/// `max(trimmed(A,B), trimmed(B,A))`.
pub fn symmetric_trimmed_hausdorff(a: &[Point], b: &[Point], trim_fraction: f64) -> Result<f64> {
    Ok(trimmed_hausdorff(a, b, trim_fraction)?.max(trimmed_hausdorff(b, a, trim_fraction)?))
}

// ---------------------------------------------------------------------------
// RGS format

/// Parses an RGS file.
pub fn load_surface(path: impl AsRef<Path>) -> Result<RingSurface> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_rgs(&text, id, path)
}

pub fn parse_rgs(text: &str, id: impl Into<String>, origin: &Path) -> Result<RingSurface> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "empty file"))?;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(origin, hline, format!("malformed header: {e}")))?;
    let [n_points, ring_size, ring_count, n_triangles] = h[..] else {
        return Err(Error::parse(
            origin,
            hline,
            format!("malformed header: expected 4 integers, got {}", h.len()),
        ));
    };
    if n_points != ring_size * ring_count {
        return Err(Error::parse(
            origin,
            hline,
            format!("header declares {n_points} points but ring_size * ring_count = {}", ring_size * ring_count),
        ));
    }

    let mut points = Vec::with_capacity(n_points);
    let mut last_line = hline;
    for k in 0..n_points {
        let Some((ln, l)) = lines.next() else {
            return Err(Error::parse(
                origin,
                last_line + 1,
                format!("point count mismatch: header declares {n_points}, found {k}"),
            ));
        };
        last_line = ln;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(origin, ln, format!("bad coordinate: {e}")))?;
        if v.len() != 3 {
            return Err(Error::parse(
                origin,
                ln,
                format!("expected 3 coordinates, got {}", v.len()),
            ));
        }
        points.push(Point::new(v[0], v[1], v[2]));
    }

    let triangles = if n_triangles > 0 {
        let mut tris = Vec::with_capacity(n_triangles);
        for k in 0..n_triangles {
            let Some((ln, l)) = lines.next() else {
                return Err(Error::parse(
                    origin,
                    last_line + 1,
                    format!("triangle count mismatch: header declares {n_triangles}, found {k}"),
                ));
            };
            last_line = ln;
            let v: Vec<usize> = l
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(origin, ln, format!("bad triangle index: {e}")))?;
            if v.len() != 3 {
                return Err(Error::parse(origin, ln, format!("expected 3 indices, got {}", v.len())));
            }
            if let Some(&bad) = v.iter().find(|&&i| i >= n_points) {
                return Err(Error::parse(
                    origin,
                    ln,
                    format!("index {bad} out of range (n_points = {n_points})"),
                ));
            }
            tris.push([v[0], v[1], v[2]]);
        }
        Some(tris)
    } else {
        None
    };
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(
            origin,
            ln,
            "point count mismatch: trailing data after declared records",
        ));
    }

    RingSurface::new(id, points, ring_size, ring_count, triangles).map_err(|e| match e {
        Error::InvalidSurface(msg) | Error::DegenerateGeometry(msg) => Error::parse(origin, hline, msg),
        other => other,
    })
}

/// Serializes a surface. Generated ring-strip triangulations are written as
/// `n_triangles = 0`; any other triangulation is written explicitly.
pub fn format_rgs(surface: &RingSurface) -> String {
    let generated = ring_strip_triangles(surface.ring_size, surface.ring_count)
        .map(|t| t == surface.triangles)
        .unwrap_or(false);
    let n_tri = if generated { 0 } else { surface.triangles.len() };
    let mut out = String::with_capacity(surface.len() * 64);
    let _ = writeln!(
        out,
        "{} {} {} {}",
        surface.len(),
        surface.ring_size,
        surface.ring_count,
        n_tri
    );
    for p in &surface.points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    if !generated {
        for t in &surface.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
    }
    out
}

pub fn save_surface(surface: &RingSurface, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_rgs(surface)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Interpolated,
    Perturbed,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Interpolated => "interpolated",
            Provenance::Perturbed => "perturbed",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Provenance::Original),
            "interpolated" => Ok(Provenance::Interpolated),
            "perturbed" => Ok(Provenance::Perturbed),
            other => Err(Error::InvalidArgument(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub surface: RingSurface,
    pub label: String,
    pub provenance: Provenance,
    /// Ids of the surfaces this entry was derived from (empty for originals).
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceDataset {
    pub entries: Vec<DatasetEntry>,
}

impl SurfaceDataset {
    pub fn new(entries: Vec<DatasetEntry>) -> Result<Self> {
        let ds = Self { entries };
        ds.check_unique_ids()?;
        Ok(ds)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.surface.id()) {
                return Err(Error::InvalidArgument(format!("duplicate surface id {}", e.surface.id())));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, entry: DatasetEntry) -> Result<()> {
        if self.get(entry.surface.id()).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate surface id {}",
                entry.surface.id()
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.surface.id() == id)
    }

    /// Sorted, de-duplicated class labels.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.entries.iter().map(|e| e.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    }

    pub fn class_members(&self, label: &str) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.label == label).collect()
    }

    pub fn index(&self) -> std::collections::HashMap<&str, &DatasetEntry> {
        self.entries.iter().map(|e| (e.surface.id(), e)).collect()
    }
}

/// Reads a manifest of `path,label[,provenance]` lines. Relative paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<SurfaceDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::parse(path, i + 1, "expected `path,label[,provenance]`"));
        }
        let p = PathBuf::from(cols[0]);
        let p = if p.is_relative() { base.join(p) } else { p };
        let surface = load_surface(&p)?;
        let provenance = match cols.get(2) {
            Some(s) => s.parse().map_err(|_| Error::parse(path, i + 1, format!("bad provenance {s:?}")))?,
            None => Provenance::Original,
        };
        entries.push(DatasetEntry {
            surface,
            label: cols[1].to_string(),
            provenance,
            parents: Vec::new(),
        });
    }
    SurfaceDataset::new(entries)
}

/// Writes every surface as `<dir>/<id>.rgs` plus `<dir>/manifest.csv`.
pub fn save_dataset(dataset: &SurfaceDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for e in &dataset.entries {
        let file = format!("{}.rgs", e.surface.id());
        save_surface(&e.surface, dir.join(&file))?;
        match e.provenance {
            Provenance::Original => {
                let _ = writeln!(manifest, "{file},{}", e.label);
            }
            p => {
                let _ = writeln!(manifest, "{file},{},{}", e.label, p.as_str());
            }
        }
    }
    let mpath = dir.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}
