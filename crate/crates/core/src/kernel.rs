//! Gaussian kernels and the kernel-measure matching dissimilarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surface::{bounding_box_diagonal, Point};

/// `exp(-|x - y|^2 / s^2)`.
#[inline]
pub fn gauss_kernel(x: &Point, y: &Point, s: f64) -> f64 {
    (-(x - y).norm_squared() / (s * s)).exp()
}

/// Scales of the registration problem: `sigma` for velocity fields, `tau`
/// for the matching term, `lambda` the weight of the matching term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl KernelParams {
    pub fn new(sigma: f64, tau: f64, lambda: f64) -> Result<Self> {
        let p = Self { sigma, tau, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("tau", self.tau), ("lambda", self.lambda)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// How kernel scales are chosen for a pair. Absolute values win; otherwise
/// the scale is a fraction of the bounding-box diagonal of the two point sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub sigma: Option<f64>,
    pub tau: Option<f64>,
    pub sigma_rel: f64,
    pub tau_rel: f64,
    pub lambda: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            tau: None,
            sigma_rel: 0.2,
            tau_rel: 0.2,
            lambda: 3e3,
        }
    }
}

impl KernelConfig {
    pub fn resolve(&self, a: &[Point], b: &[Point]) -> Result<KernelParams> {
        let diag = || {
            let mut all = Vec::with_capacity(a.len() + b.len());
            all.extend_from_slice(a);
            all.extend_from_slice(b);
            bounding_box_diagonal(&all)
        };
        let sigma = self.sigma.unwrap_or_else(|| self.sigma_rel * diag());
        let tau = self.tau.unwrap_or_else(|| self.tau_rel * diag());
        KernelParams::new(sigma, tau, self.lambda)
    }
}

fn kernel_sum(a: &[Point], b: &[Point], inv_s2: f64) -> f64 {
    a.iter()
        .map(|x| b.iter().map(|y| (-(x - y).norm_squared() * inv_s2).exp()).sum::<f64>())
        .sum()
}

fn lex_le(a: &[Point], b: &[Point]) -> bool {
    let ord = a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .flat_map(|p| p.iter())
            .zip(b.iter().flat_map(|p| p.iter()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    ord.is_le()
}

/// Squared kernel distance between the uniform empirical measures on `a`
/// and `b` with the Gaussian kernel of scale `tau`.
pub fn hilb_dissimilarity(a: &[Point], b: &[Point], tau: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let inv = 1.0 / (tau * tau);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let saa = kernel_sum(a, a, inv) / (n * n);
    let sbb = kernel_sum(b, b, inv) / (m * m);
    // The cross sum runs in a canonical argument order so that swapping a
    // and b reproduces the same floating point result.
    let sab = if lex_le(a, b) {
        kernel_sum(a, b, inv)
    } else {
        kernel_sum(b, a, inv)
    } / (n * m);
    let v = (saa + sbb) - 2.0 * sab;
    Ok(v.max(0.0))
}

/// The matching term `HILB(z, target)` as a function of the moving points
/// `z`, with derivatives.
#[derive(Debug, Clone)]
pub struct HilbTerm {
    target: Vec<Point>,
    tau: f64,
    target_self: f64,
}

impl HilbTerm {
    pub fn new(target: Vec<Point>, tau: f64) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::EmptySet);
        }
        let m = target.len() as f64;
        let target_self = kernel_sum(&target, &target, 1.0 / (tau * tau)) / (m * m);
        Ok(Self {
            target,
            tau,
            target_self,
        })
    }

    pub fn target(&self) -> &[Point] {
        &self.target
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn value(&self, z: &[Point]) -> f64 {
        self.at(z).value()
    }

    /// Mean over `z` of the cross-term Hessian diagonal
    /// `4 / (tau^2 N M) sum_m Q(z_i, y_m)`: the typical stiffness of the
    /// matching term per moving point.
    pub fn curvature_scale(&self, z: &[Point]) -> f64 {
        let inv = 1.0 / (self.tau * self.tau);
        let (n, m) = (z.len() as f64, self.target.len() as f64);
        kernel_sum(z, &self.target, inv) * 4.0 * inv / (n * n * m)
    }

    /// Caches the kernel matrices at `z` for value, gradient and
    /// Hessian-vector products.
    pub fn at(&self, z: &[Point]) -> HilbLocal<'_> {
        let inv = 1.0 / (self.tau * self.tau);
        let n = z.len();
        let m = self.target.len();
        let mut qzz = vec![0.0; n * n];
        for i in 0..n {
            qzz[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = (-(z[i] - z[j]).norm_squared() * inv).exp();
                qzz[i * n + j] = v;
                qzz[j * n + i] = v;
            }
        }
        let mut qzy = vec![0.0; n * m];
        for i in 0..n {
            for (j, y) in self.target.iter().enumerate() {
                qzy[i * m + j] = (-(z[i] - y).norm_squared() * inv).exp();
            }
        }
        HilbLocal {
            term: self,
            z: z.to_vec(),
            qzz,
            qzy,
        }
    }
}

pub struct HilbLocal<'a> {
    term: &'a HilbTerm,
    z: Vec<Point>,
    qzz: Vec<f64>,
    qzy: Vec<f64>,
}

impl HilbLocal<'_> {
    pub fn value(&self) -> f64 {
        let n = self.z.len() as f64;
        let m = self.term.target.len() as f64;
        let szz: f64 = self.qzz.iter().sum::<f64>() / (n * n);
        let szy: f64 = self.qzy.iter().sum::<f64>() / (n * m);
        (szz + self.term.target_self - 2.0 * szy).max(0.0)
    }

    pub fn gradient(&self) -> Vec<Point> {
        let n = self.z.len();
        let m = self.term.target.len();
        let inv = 1.0 / (self.term.tau * self.term.tau);
        let c_self = -4.0 * inv / (n * n) as f64;
        let c_cross = 4.0 * inv / (n * m) as f64;
        (0..n)
            .map(|i| {
                let zi = self.z[i];
                let mut g = Point::zeros();
                let row = &self.qzz[i * n..(i + 1) * n];
                for (j, q) in row.iter().enumerate() {
                    g += (c_self * q) * (zi - self.z[j]);
                }
                let row = &self.qzy[i * m..(i + 1) * m];
                for (y, q) in self.term.target.iter().zip(row) {
                    g += (c_cross * q) * (zi - y);
                }
                g
            })
            .collect()
    }

    /// Hessian of `HILB` at `z` applied to `d`.
    pub fn hessian_apply(&self, d: &[Point]) -> Vec<Point> {
        let n = self.z.len();
        let m = self.term.target.len();
        let inv = 1.0 / (self.term.tau * self.term.tau);
        let c_self = -4.0 * inv / (n * n) as f64;
        let c_cross = 4.0 * inv / (n * m) as f64;
        (0..n)
            .map(|i| {
                let zi = self.z[i];
                let di = d[i];
                let mut h = Point::zeros();
                let row = &self.qzz[i * n..(i + 1) * n];
                for (j, q) in row.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let r = zi - self.z[j];
                    let dd = di - d[j];
                    h += (c_self * q) * (dd - (2.0 * inv * r.dot(&dd)) * r);
                }
                let row = &self.qzy[i * m..(i + 1) * m];
                for (y, q) in self.term.target.iter().zip(row) {
                    let r = zi - y;
                    h += (c_cross * q) * (di - (2.0 * inv * r.dot(&di)) * r);
                }
                h
            })
            .collect()
    }
}
