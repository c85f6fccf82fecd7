//! Synthetic labeled ring surfaces: valve-like saddle bands whose innermost
//! ring plays the role of a closure curve. The "gapped" class carries a
//! localized opening near that curve.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;
use crate::standardize::Similarity;
use crate::surface::{DatasetEntry, Point, Provenance, RingSurface, SurfaceDataset, Triangle};

pub const CLOSED: &str = "closed";
pub const GAPPED: &str = "gapped";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_closed: usize,
    pub n_gapped: usize,
    pub ring_size: usize,
    pub ring_count: usize,
    /// Angular half-width range of the opening, radians.
    pub gap_width: (f64, f64),
    /// Depth range of the opening, in units of the band's outer radius.
    pub gap_depth: (f64, f64),
    /// Amplitude of the smooth per-surface shape noise.
    pub noise: f64,
    /// Apply a random rotation, translation and scale to every surface.
    pub pose_jitter: bool,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_closed: 100,
            n_gapped: 60,
            ring_size: 80,
            ring_count: 10,
            gap_width: (0.7, 1.0),
            gap_depth: (0.3, 0.4),
            noise: 0.01,
            pose_jitter: true,
            seed: 7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.ring_size < 3 || self.ring_count < 2 {
            return Err(Error::InvalidArgument("need ring_size >= 3 and ring_count >= 2".into()));
        }
        let ok = |r: (f64, f64)| r.0 >= 0.0 && r.0 <= r.1 && r.1.is_finite();
        if !ok(self.gap_width) || !ok(self.gap_depth) || !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("gap ranges and noise must be nonnegative and ordered".into()));
        }
        if self.gap_depth.1 > 0.4 {
            return Err(Error::InvalidArgument("gap depth above 0.4 folds the band".into()));
        }
        Ok(())
    }
}

/// Per-surface shape draws.
#[derive(Debug, Clone)]
struct Shape {
    aspect: f64,
    saddle: f64,
    /// Fourier coefficients (cos, sin) of the height and radial noise, orders 1..=3.
    z_noise: [(f64, f64); 3],
    r_noise: [(f64, f64); 3],
    gap: Option<(f64, f64, f64)>,
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

fn band_points(shape: &Shape, ring_size: usize, ring_count: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(ring_size * ring_count);
    for k in 0..ring_count {
        let v = k as f64 / (ring_count - 1) as f64;
        let ax = 1.0 - 0.4 * v;
        let ay = shape.aspect * (0.8 - 0.6 * v);
        for i in 0..ring_size {
            let th = i as f64 * TAU / ring_size as f64;
            let fourier = |c: &[(f64, f64); 3]| -> f64 {
                c.iter()
                    .enumerate()
                    .map(|(l, (a, b))| {
                        let l = (l + 1) as f64;
                        a * (l * th).cos() + b * (l * th).sin()
                    })
                    .sum()
            };
            let radial = 1.0 + fourier(&shape.r_noise) * (0.5 + v);
            let (c, s) = (th.cos(), th.sin());
            let mut p = Point::new(ax * c * radial, ay * s * radial, 0.0);
            p.z = shape.saddle * (p.x * p.x - p.y * p.y) + 0.35 * v * v + fourier(&shape.z_noise) * (0.5 + v);
            if let Some((center, width, depth)) = shape.gap {
                let d = angle_diff(th, center) / width;
                if d.abs() < 1.0 {
                    let g = (0.5 * PI * d).cos().powi(2);
                    let w = depth * g * v * v * v;
                    // Retract toward the outer rim and sag below the sheet.
                    let dir = Point::new(c, s, 0.0);
                    p += 0.3 * w * dir;
                    p.z -= w;
                }
            }
            pts.push(p);
        }
    }
    pts
}

fn draw_shape<R: Rng>(rng: &mut R, params: &SynthParams, gapped: bool) -> Shape {
    let mut coeffs = || {
        let mut c = [(0.0, 0.0); 3];
        for (l, e) in c.iter_mut().enumerate() {
            let amp = params.noise / (l + 1) as f64;
            *e = (amp * rng.random_range(-1.0..1.0), amp * rng.random_range(-1.0..1.0));
        }
        c
    };
    let z_noise = coeffs();
    let r_noise = coeffs();
    let gap = gapped.then(|| {
        let pick = |rng: &mut R, r: (f64, f64)| if r.0 < r.1 { rng.random_range(r.0..=r.1) } else { r.0 };
        let center = rng.random_range(0.0..TAU);
        (center, pick(rng, params.gap_width), pick(rng, params.gap_depth))
    });
    Shape {
        aspect: 1.0 + 0.05 * rng.random_range(-1.0..1.0),
        saddle: 0.15 + 0.03 * rng.random_range(-1.0..1.0),
        z_noise,
        r_noise,
        gap,
    }
}

/// One synthetic surface, deterministic in `(params.seed, id)`.
pub fn generate_one(params: &SynthParams, id: &str, gapped: bool) -> Result<RingSurface> {
    let mut last = None;
    for attempt in 0..5 {
        let mut rng = rng_for(params.seed, id, &format!("shape/{attempt}"));
        let shape = draw_shape(&mut rng, params, gapped);
        let mut pts = band_points(&shape, params.ring_size, params.ring_count);
        if params.pose_jitter {
            let pose = Similarity::random(&mut rng, 1.0, 2.0);
            for p in pts.iter_mut() {
                *p = pose.apply(p);
            }
        }
        match RingSurface::new(id, pts, params.ring_size, params.ring_count, None) {
            Ok(s) => return Ok(s),
            Err(e) => {
                log::warn!("synthetic surface {id} attempt {attempt} rejected: {e}");
                last = Some(e);
            }
        }
    }
    Err(last.unwrap_or_else(|| Error::DegenerateGeometry(id.into())))
}

pub fn generate(params: &SynthParams) -> Result<SurfaceDataset> {
    params.validate()?;
    let mut entries = Vec::with_capacity(params.n_closed + params.n_gapped);
    for (label, n, gapped) in [(CLOSED, params.n_closed, false), (GAPPED, params.n_gapped, true)] {
        for i in 0..n {
            let id = format!("{label}_{i:03}");
            entries.push(DatasetEntry {
                surface: generate_one(params, &id, gapped)?,
                label: label.to_string(),
                provenance: Provenance::Original,
                parents: Vec::new(),
            });
        }
    }
    SurfaceDataset::new(entries)
}

/// Latitude rings of an ellipsoid with semi-axes `axes`, polar caps removed.
pub fn ellipsoid_band(id: &str, ring_size: usize, ring_count: usize, axes: Point) -> Result<RingSurface> {
    let max_lat = 75f64.to_radians();
    let mut pts = Vec::with_capacity(ring_size * ring_count);
    for k in 0..ring_count {
        let lat = -max_lat + 2.0 * max_lat * k as f64 / (ring_count - 1) as f64;
        for i in 0..ring_size {
            let lon = i as f64 * TAU / ring_size as f64;
            pts.push(Point::new(
                axes.x * lat.cos() * lon.cos(),
                axes.y * lat.cos() * lon.sin(),
                axes.z * lat.sin(),
            ));
        }
    }
    RingSurface::new(id, pts, ring_size, ring_count, None)
}

pub fn sphere_band(id: &str, ring_size: usize, ring_count: usize, radius: f64) -> Result<RingSurface> {
    ellipsoid_band(id, ring_size, ring_count, Point::new(radius, radius, radius))
}

/// Subdivided icosahedron projected on the sphere. Stored as a single ring
/// with an explicit triangulation.
pub fn icosphere(id: &str, subdivisions: usize, radius: f64) -> Result<RingSurface> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut pts: Vec<Point> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Point::new(x, y, z).normalize())
    .collect();
    let mut tris: Vec<Triangle> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, pts: &mut Vec<Point>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                pts.push(((pts[a] + pts[b]) / 2.0).normalize());
                pts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for [a, b, c] in tris {
            let ab = midpoint(a, b, &mut pts);
            let bc = midpoint(b, c, &mut pts);
            let ca = midpoint(c, a, &mut pts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    let n = pts.len();
    let pts = pts.into_iter().map(|p| radius * p).collect();
    RingSurface::new(id, pts, n, 1, Some(tris))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::surface_area;

    #[test]
    fn icosphere_area_approaches_sphere() {
        let s = icosphere("ico", 3, 1.0).unwrap();
        assert_eq!(s.triangles().len(), 1280);
        let rel = (surface_area(&s) - 4.0 * PI).abs() / (4.0 * PI);
        assert!(rel < 0.02, "{rel}");
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SynthParams {
            n_closed: 2,
            n_gapped: 2,
            ..Default::default()
        };
        let a = generate(&p).unwrap();
        let b = generate(&p).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.surface, y.surface);
            assert_eq!(x.label, y.label);
        }
        assert_eq!(a.entries[0].surface.len(), 800);
        assert_eq!(a.class_members(GAPPED).len(), 2);
    }

    #[test]
    fn sphere_band_counts() {
        let s = sphere_band("s", 20, 10, 1.0).unwrap();
        assert_eq!(s.len(), 200);
        assert_eq!(s.triangles().len(), 2 * 20 * 9);
    }
}
