//! Smooth Gaussian random fields on R^3 with covariance `exp(-|x - y|^2)`,
//! simulated by a truncated Karhunen–Loève series in tensor products of
//! one-dimensional Hermite eigenfunctions.
//!
//! The one-dimensional kernel `exp(-(t - t')^2)` is diagonalized in the
//! weighted space with density `exp(-t^2) / sqrt(pi)`:
//! `lambda_n = a^(n + 1/2)`, `phi_n(t) = b exp(-c t^2) H_n(h t) / sqrt(2^n n!)`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;
use crate::surface::Point;

/// Physicists' Hermite polynomial by upward recursion.
pub fn hermite_eval(n: usize, t: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * t);
    if n == 0 {
        return h0;
    }
    for k in 1..n {
        let h2 = 2.0 * t * h1 - 2.0 * k as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Orthonormal Hermite functions `psi_0..=psi_n` at `u`, each bounded by 1.
fn hermite_functions(n: usize, u: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(PI.powf(-0.25) * (-0.5 * u * u).exp());
    if n >= 1 {
        out.push(2f64.sqrt() * u * out[0]);
    }
    for k in 1..n {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * u * out[k] - (kf / (kf + 1.0)).sqrt() * out[k - 1];
        out.push(next);
    }
}

/// Gauss–Hermite rule for `int f(x) exp(-x^2) dx`, stored with scaled
/// weights `w_k exp(x_k^2)` so that `int g(x) dx ~ sum_k omega_k g(x_k)` for
/// `g = poly * exp(-x^2)` without overflow.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub scaled_weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jac[(k, k - 1)] = off;
            jac[(k - 1, k)] = off;
        }
        let mut nodes: Vec<f64> = jac.symmetric_eigen().eigenvalues.iter().copied().collect();
        nodes.sort_by(f64::total_cmp);
        let mut psi = Vec::with_capacity(n);
        let scaled_weights = nodes
            .iter()
            .map(|&x| {
                hermite_functions(n - 1, x, &mut psi);
                1.0 / psi.iter().map(|v| v * v).sum::<f64>()
            })
            .collect();
        Self { nodes, scaled_weights }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantSource {
    /// `a = 1 / (1 + sqrt(5) / 2)`.
    Literal,
    /// `a = (3 - sqrt(5)) / 2`, the Gaussian-kernel decomposition value.
    Standard,
}

pub const MERCER_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub h: f64,
    pub max_degree: usize,
    pub source: ConstantSource,
    lambda: Vec<f64>,
    sqrt_lambda: Vec<f64>,
}

impl EigenBasis {
    fn with_a(a: f64, source: ConstantSource, max_degree: usize) -> Self {
        let c = (5f64.sqrt() - 1.0) / 2.0;
        let h = 5f64.powf(0.25);
        // Unit norm of phi_0 under the weight exp(-t^2) / sqrt(pi).
        let b = (1.0 + 2.0 * c).powf(0.25);
        let lambda: Vec<f64> = (0..=max_degree).map(|n| a.powf(n as f64 + 0.5)).collect();
        let sqrt_lambda = lambda.iter().map(|l| l.sqrt()).collect();
        Self {
            a,
            b,
            c,
            h,
            max_degree,
            source,
            lambda,
            sqrt_lambda,
        }
    }

    pub fn literal(max_degree: usize) -> Self {
        Self::with_a(1.0 / (1.0 + 5f64.sqrt() / 2.0), ConstantSource::Literal, max_degree)
    }

    pub fn standard(max_degree: usize) -> Self {
        Self::with_a((3.0 - 5f64.sqrt()) / 2.0, ConstantSource::Standard, max_degree)
    }

    /// The literal constants if they pass the Mercer check at degree 40,
    /// the standard ones otherwise.
    pub fn validated(max_degree: usize) -> Self {
        let lit = Self::literal(max_degree.max(40));
        let chosen = if lit.mercer_error(40, 2.0, 21) <= MERCER_TOLERANCE {
            Self::literal(max_degree)
        } else {
            Self::standard(max_degree)
        };
        log::debug!("eigenbasis constants: {:?} (a = {})", chosen.source, chosen.a);
        chosen
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `phi_0(t) ..= phi_n(t)`.
    fn eigenfunctions_into(&self, n: usize, t: f64, psi: &mut Vec<f64>) {
        hermite_functions(n, self.h * t, psi);
        // b exp(-c t^2) H_k(h t) / sqrt(2^k k!) = b pi^(1/4) exp((h^2/2 - c) t^2) psi_k(h t)
        let scale = self.b * PI.powf(0.25) * ((0.5 * self.h * self.h - self.c) * t * t).exp();
        for v in psi.iter_mut() {
            *v *= scale;
        }
    }

    pub fn eigenfunction(&self, n: usize, t: f64) -> Result<f64> {
        let mut psi = Vec::with_capacity(n + 1);
        self.eigenfunctions_into(n, t, &mut psi);
        let v = psi[n];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::EigenRange { n, t })
        }
    }

    /// Inner product in the weighted space, by Gauss–Hermite quadrature in
    /// `u = h t`.
    pub fn inner(&self, n: usize, m: usize, rule: &GaussHermite) -> f64 {
        let mut psi = Vec::new();
        let k = n.max(m);
        let expo = 1.0 - (1.0 + 2.0 * self.c) / (self.h * self.h);
        let sum: f64 = rule
            .nodes
            .iter()
            .zip(&rule.scaled_weights)
            .map(|(&u, &w)| {
                hermite_functions(k, u, &mut psi);
                w * psi[n] * psi[m] * (expo * u * u).exp()
            })
            .sum();
        self.b * self.b / self.h * sum
    }

    /// Largest `|<phi_n, phi_m> - delta_nm|` over `n, m <= degree`.
    pub fn orthonormality_error(&self, degree: usize, rule: &GaussHermite) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 0..=degree {
            for m in n..=degree {
                let target = if n == m { 1.0 } else { 0.0 };
                worst = worst.max((self.inner(n, m, rule) - target).abs());
            }
        }
        worst
    }

    /// Largest deviation of the truncated Mercer series from the kernel on
    /// a `points x points` grid over `[-radius, radius]^2`.
    pub fn mercer_error(&self, degree: usize, radius: f64, points: usize) -> f64 {
        let grid: Vec<f64> = (0..points)
            .map(|i| -radius + 2.0 * radius * i as f64 / (points - 1).max(1) as f64)
            .collect();
        let a = self.a;
        let phis: Vec<Vec<f64>> = grid
            .iter()
            .map(|&t| {
                let mut p = Vec::new();
                self.eigenfunctions_into(degree, t, &mut p);
                p
            })
            .collect();
        let mut worst: f64 = 0.0;
        for (i, &t) in grid.iter().enumerate() {
            for (j, &s) in grid.iter().enumerate() {
                let series: f64 = (0..=degree)
                    .map(|n| a.powf(n as f64 + 0.5) * phis[i][n] * phis[j][n])
                    .sum();
                worst = worst.max((series - (-(t - s) * (t - s)).exp()).abs());
            }
        }
        worst
    }
}

/// Smallest `N >= 7` with `exp(r^2 / 2) N^0.7 / 2^N <= target`.
pub fn truncation_for_tolerance(target: f64, radius: f64) -> Result<usize> {
    if !(target > 0.0) {
        return Err(Error::InvalidArgument("target error must be positive".into()));
    }
    let bound = |n: usize| (0.5 * radius * radius).exp() * (n as f64).powf(0.7) / 2f64.powi(n as i32);
    let mut n = 7;
    while bound(n) > target {
        n += 1;
        if n > 1000 {
            return Err(Error::InvalidArgument(format!("target {target} unreachable")));
        }
    }
    Ok(n)
}

/// Largest scaled norm accepted by the field evaluators.
pub const FIELD_DOMAIN_RADIUS: f64 = 4.0;

/// One realization of a three-component field with independent components
/// `W^j(x) = U^j(x / s_j)`.
#[derive(Debug, Clone)]
pub struct FieldSpec {
    pub truncation: usize,
    pub scales: [f64; 3],
    pub seed: u64,
    basis: EigenBasis,
    /// Per component, `Z[m][n][p]` flattened with `p` fastest.
    coefficients: [Vec<f64>; 3],
}

impl FieldSpec {
    pub fn new(truncation: usize, scales: [f64; 3], seed: u64) -> Result<Self> {
        Self::with_basis(EigenBasis::validated(truncation), truncation, scales, seed)
    }

    pub fn with_basis(basis: EigenBasis, truncation: usize, scales: [f64; 3], seed: u64) -> Result<Self> {
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("field scales must be positive".into()));
        }
        if basis.max_degree < truncation {
            return Err(Error::InvalidArgument("eigenbasis degree below truncation".into()));
        }
        let len = (truncation + 1).pow(3);
        let coefficients = std::array::from_fn(|j| {
            let mut rng = rng_for(seed, "field", &format!("component/{j}"));
            (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
        });
        Ok(Self {
            truncation,
            scales,
            seed,
            basis,
            coefficients,
        })
    }

    /// Same field with every coefficient set to zero.
    pub fn zeroed(mut self) -> Self {
        for c in self.coefficients.iter_mut() {
            c.iter_mut().for_each(|z| *z = 0.0);
        }
        self
    }

    pub fn basis(&self) -> &EigenBasis {
        &self.basis
    }

    fn scaled(&self, j: usize, x: &Point, index: usize) -> Result<Point> {
        let y = x / self.scales[j];
        let norm = y.norm();
        if !(norm <= FIELD_DOMAIN_RADIUS) {
            return Err(Error::FieldDomain { index, norm });
        }
        Ok(y)
    }

    /// `sqrt(lambda_k) phi_k(t)` for `k = 0..=n`.
    fn weighted_phis(&self, n: usize, t: f64, buf: &mut Vec<f64>) {
        self.basis.eigenfunctions_into(n, t, buf);
        for (v, s) in buf.iter_mut().zip(&self.basis.sqrt_lambda) {
            *v *= s;
        }
    }

    fn partial_sum(&self, j: usize, y: &Point, n: usize) -> f64 {
        let stride = self.truncation + 1;
        let (mut f1, mut f2, mut f3) = (Vec::new(), Vec::new(), Vec::new());
        self.weighted_phis(n, y.x, &mut f1);
        self.weighted_phis(n, y.y, &mut f2);
        self.weighted_phis(n, y.z, &mut f3);
        let z = &self.coefficients[j];
        let mut total = 0.0;
        for (m, a) in f1.iter().enumerate() {
            let mut inner = 0.0;
            for (k, b) in f2.iter().enumerate() {
                let row = &z[(m * stride + k) * stride..][..=n];
                let dot: f64 = row.iter().zip(&f3).map(|(zz, c)| zz * c).sum();
                inner += b * dot;
            }
            total += a * inner;
        }
        total
    }

    /// `U^j(N)` at `x / s_j`.
    pub fn sample_scalar(&self, j: usize, x: &Point) -> Result<f64> {
        self.sample_scalar_truncated(j, x, self.truncation)
    }

    /// Partial sum over `max(m, n, p) <= n`, for `n` up to the field's truncation.
    pub fn sample_scalar_truncated(&self, j: usize, x: &Point, n: usize) -> Result<f64> {
        if j > 2 || n > self.truncation {
            return Err(Error::InvalidArgument(format!("component {j} / truncation {n} out of range")));
        }
        let y = self.scaled(j, x, 0)?;
        Ok(self.partial_sum(j, &y, n))
    }

    pub fn sample_vector(&self, x: &Point) -> Result<Point> {
        Ok(Point::new(
            self.sample_scalar(0, x)?,
            self.sample_scalar(1, x)?,
            self.sample_scalar(2, x)?,
        ))
    }

    /// The field at every point, with domain errors naming the point index.
    pub fn sample_many(&self, xs: &[Point]) -> Result<Vec<Point>> {
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let mut w = Point::zeros();
                for j in 0..3 {
                    let y = self.scaled(j, x, i)?;
                    w[j] = self.partial_sum(j, &y, self.truncation);
                }
                Ok(w)
            })
            .collect()
    }

    /// `x y z W1 W2 W3` rows.
    pub fn dump(&self, xs: &[Point]) -> Result<String> {
        let mut s = String::new();
        for (x, w) in xs.iter().zip(self.sample_many(xs)?) {
            let _ = writeln!(s, "{} {} {} {} {} {}", x.x, x.y, x.z, w.x, w.y, w.z);
        }
        Ok(s)
    }
}
