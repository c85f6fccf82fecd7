//! Isotropic strain of a point-to-point map between two triangulated grids.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::surface::{triangle_area, RingSurface};

/// Per-point isotropic strain intensities `|sqrt(area ratio) - 1|`, in the
/// source's storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainField {
    pub isi: Vec<f64>,
}

impl StrainField {
    pub fn len(&self) -> usize {
        self.isi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.isi.is_empty()
    }

    /// The last `k` entries.
    pub fn tail(&self, k: usize) -> &[f64] {
        &self.isi[self.isi.len() - k.min(self.isi.len())..]
    }

    /// One value per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.isi {
            let _ = writeln!(s, "{v}");
        }
        s
    }
}

fn fan_areas(s: &RingSurface, points: &[crate::surface::Point]) -> Vec<f64> {
    let mut fan = vec![0.0; points.len()];
    for tri in s.triangles() {
        let a = triangle_area(points, tri);
        for &i in tri {
            fan[i] += a;
        }
    }
    fan
}

/// Strain of the map `source[i] -> deformed[i]`, measured on the union of
/// source triangles around each point.
pub fn isotropic_strain(source: &RingSurface, deformed: &RingSurface) -> Result<StrainField> {
    if source.len() != deformed.len() {
        return Err(Error::InvalidArgument(format!(
            "point counts differ: {} vs {}",
            source.len(),
            deformed.len()
        )));
    }
    let before = fan_areas(source, source.points());
    let after = fan_areas(source, deformed.points());
    let mut isi = Vec::with_capacity(before.len());
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        if !(*b > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "vertex {i} of surface {} has a zero-area triangle fan",
                source.id()
            )));
        }
        isi.push(((a / b).sqrt() - 1.0).abs());
    }
    Ok(StrainField { isi })
}

/// Nearest-rank `alpha`-quantile of the last `tail_k` entries: the
/// `ceil(alpha * k)`-th smallest value.
pub fn strain_quantile(field: &StrainField, alpha: f64, tail_k: usize) -> Result<f64> {
    if tail_k == 0 || tail_k > field.len() {
        return Err(Error::InvalidArgument(format!(
            "tail size {tail_k} outside 1..={}",
            field.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut v = field.tail(tail_k).to_vec();
    let rank = ((alpha * tail_k as f64).ceil() as usize).clamp(1, tail_k);
    let (_, x, _) = v.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::Point;

    fn grid() -> RingSurface {
        let pts: Vec<Point> = (0..3)
            .flat_map(|k| (0..6).map(move |i| {
                let th = i as f64 * std::f64::consts::TAU / 6.0;
                let r = 1.0 + 0.5 * k as f64;
                Point::new(r * th.cos(), r * th.sin(), 0.0)
            }))
            .collect();
        RingSurface::new("g", pts, 6, 3, None).unwrap()
    }

    #[test]
    fn identity_and_homothety() {
        let s = grid();
        let f = isotropic_strain(&s, &s).unwrap();
        assert!(f.isi.iter().all(|&v| v == 0.0));
        let scaled = s.map_points(|p| 1.7 * p).unwrap();
        let f = isotropic_strain(&s, &scaled).unwrap();
        assert!(f.isi.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn nearest_rank_by_hand() {
        let mut isi = vec![0.01; 700];
        isi.extend(vec![0.5; 100]);
        let f = StrainField { isi };
        assert_eq!(strain_quantile(&f, 0.95, 80).unwrap(), 0.5);
        let f = StrainField {
            isi: vec![0.5, 0.1, 0.3, 0.2, 0.4],
        };
        assert_eq!(strain_quantile(&f, 0.5, 5).unwrap(), 0.3);
        assert!(strain_quantile(&f, 0.5, 0).is_err());
        assert!(strain_quantile(&f, 0.5, 6).is_err());
    }
}
