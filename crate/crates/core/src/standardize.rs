//! Reduction of a surface to its canonical representative under rotations,
//! translations and homotheties: centered at its mass center, rotated into
//! its inertia eigenframe, rescaled to unit area.

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion};
use rand::Rng;

use crate::error::{Error, Result};
use crate::surface::{surface_area, Point, RingSurface};

/// Relative eigenvalue gap below which the eigenframe is reported ambiguous.
pub const EIGEN_GAP_REL: f64 = 1e-6;

/// A similarity transform `y -> scale * (rotation * y + translation)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Point,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Point::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, y: &Point) -> Point {
        self.scale * (self.rotation * y + self.translation)
    }

    pub fn apply_surface(&self, s: &RingSurface) -> Result<RingSurface> {
        s.map_points(|p| self.apply(p))
    }

    /// Uniformly random rotation, Gaussian translation of standard deviation
    /// `shift`, log-uniform scale in `[1/max_scale, max_scale]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, shift: f64, max_scale: f64) -> Self {
        let rotation = random_rotation(rng);
        let translation = Point::new(
            shift * normal(rng),
            shift * normal(rng),
            shift * normal(rng),
        );
        let ls = max_scale.ln();
        let scale = (rng.random_range(-ls..=ls)).exp();
        Self {
            rotation,
            translation,
            scale,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    // Normalized Gaussian 4-vector is a uniform unit quaternion.
    let q = nalgebra::Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

#[derive(Debug, Clone)]
pub struct StandardizedSurface {
    pub surface: RingSurface,
    /// Maps the original surface onto `surface`.
    pub transform: Similarity,
    /// Set when two inertia eigenvalues are closer than [`EIGEN_GAP_REL`].
    pub warning: Option<String>,
}

pub fn center_of_mass(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    points.iter().fold(Point::zeros(), |acc, p| acc + p) / n
}

/// Covariance tensor of the uniform point measure about its center.
pub fn inertia_tensor(points: &[Point]) -> Result<Matrix3<f64>> {
    if points.is_empty() {
        return Err(Error::EmptySet);
    }
    let c = center_of_mass(points);
    let n = points.len() as f64;
    let t = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - c;
        acc + d * d.transpose()
    }) / n;
    let mut ev: Vec<f64> = t.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if ev[2] <= 0.0 || ev[1] <= 1e-12 * ev[2] {
        return Err(Error::DegenerateGeometry(
            "inertia tensor has rank < 2 (points identical or collinear)".into(),
        ));
    }
    Ok(t)
}

/// Eigenpairs in ascending eigenvalue order.
fn sorted_eigen(t: &Matrix3<f64>) -> ([f64; 3], [Point; 3]) {
    let eig = SymmetricEigen::new(*t);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = idx.map(|i| eig.eigenvalues[i]);
    let vecs = idx.map(|i| eig.eigenvectors.column(i).into_owned());
    (vals, vecs)
}

/// Orients an eigenvector intrinsically: the third moment of the point
/// cloud along it is made positive. Falls back to "largest coordinate
/// positive" when the cloud is symmetric along that axis.
fn orient(v: Point, centered: &[Point], spread: f64) -> Point {
    let skew: f64 = centered.iter().map(|d| d.dot(&v).powi(3)).sum::<f64>() / centered.len() as f64;
    if skew.abs() > 1e-9 * spread.powi(3) {
        return if skew > 0.0 { v } else { -v };
    }
    let k = v.iamax();
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

pub fn standardize(surface: &RingSurface) -> Result<StandardizedSurface> {
    let pts = surface.points();
    let c = center_of_mass(pts);
    let tensor = inertia_tensor(pts)?;
    let (vals, vecs) = sorted_eigen(&tensor);

    let mut warning = None;
    for j in 0..2 {
        if (vals[j + 1] - vals[j]) < EIGEN_GAP_REL * vals[2] {
            let msg = format!(
                "surface {}: inertia eigenvalues {} and {} nearly equal ({:e}, {:e}); eigenframe fixed by tie-break",
                surface.id(),
                j + 1,
                j + 2,
                vals[j],
                vals[j + 1]
            );
            log::warn!("{msg}");
            warning = Some(msg);
        }
    }

    let centered: Vec<Point> = pts.iter().map(|p| p - c).collect();
    let spread = vals[2].sqrt();
    let e1 = orient(vecs[0], &centered, spread);
    let e2 = orient(vecs[1], &centered, spread);
    // Third axis completes a right-handed frame so det(rotation) = +1.
    let e3 = e1.cross(&e2).normalize();
    let rotation = Matrix3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()]);

    let area = surface_area(surface);
    if !(area > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "surface {} has zero area",
            surface.id()
        )));
    }
    let transform = Similarity {
        rotation,
        translation: -(rotation * c),
        scale: 1.0 / area.sqrt(),
    };
    Ok(StandardizedSurface {
        surface: transform.apply_surface(surface)?,
        transform,
        warning,
    })
}
