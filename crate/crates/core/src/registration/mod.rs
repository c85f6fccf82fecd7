//! Diffeomorphic registration with time-discretized kernel velocity fields.
//!
//! Velocities are `v_j(z) = sum_i K_sigma(x_i^j, z) a_i^j` on `q` Euler
//! steps of length `1/q`. Registration minimizes `kin(a) + lambda *
//! HILB(x^q, target)`, either with L-BFGS on the coefficients or with
//! consensus ADMM on the relaxed problem.

mod admm;
mod krylov;
mod lbfgs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{HilbTerm, KernelParams};
use crate::surface::{symmetric_trimmed_hausdorff, Point, RingSurface};

pub(crate) type Nodes = Vec<Vec<Point>>;

#[derive(Debug, Clone, Serialize)]
pub struct AdmmLog {
    /// Augmented Lagrangian after the dual update.
    pub augmented: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub chi: f64,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Reduced objective `kin + lambda * HILB` of the current coefficients.
    pub objective: f64,
    pub gradient_norm: Option<f64>,
    pub admm: Option<AdmmLog>,
    pub mismatch: Option<f64>,
}

pub(crate) struct Outcome {
    pub a: Nodes,
    pub iterations: usize,
    /// The objective stopped improving before the iteration cap.
    pub stalled: bool,
    pub history: Vec<IterationLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Lbfgs,
    Admm,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Self::Lbfgs),
            "admm" => Ok(Self::Admm),
            _ => Err(Error::InvalidArgument(format!("unknown solver {s:?}"))),
        }
    }
}

/// Dense symmetric Gaussian kernel matrix over one set of points.
#[derive(Debug, Clone)]
pub(crate) struct KernelMatrix {
    m: usize,
    k: Vec<f64>,
}

impl KernelMatrix {
    pub fn new(x: &[Point], sigma: f64) -> Self {
        let m = x.len();
        let inv = 1.0 / (sigma * sigma);
        let mut k = vec![0.0; m * m];
        for i in 0..m {
            k[i * m + i] = 1.0;
            for j in i + 1..m {
                let v = (-(x[i] - x[j]).norm_squared() * inv).exp();
                k[i * m + j] = v;
                k[j * m + i] = v;
            }
        }
        Self { m, k }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.k[i * self.m..(i + 1) * self.m]
    }

    pub fn apply(&self, a: &[Point]) -> Vec<Point> {
        (0..self.m)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(a)
                    .fold(Point::zeros(), |acc, (k, ai)| acc + *k * ai)
            })
            .collect()
    }

    pub fn row_sq_sums(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.row(i).iter().map(|k| k * k).sum()).collect()
    }

    /// `sum_{i,k} K_ik <a_i, a_k>`.
    pub fn quad(&self, a: &[Point]) -> f64 {
        let ka = self.apply(a);
        a.iter().zip(&ka).map(|(x, y)| x.dot(y)).sum()
    }
}

fn check_finite(points: &[Point], node: usize) -> Result<()> {
    if points.iter().all(|p| p.iter().all(|c| c.is_finite())) {
        Ok(())
    } else {
        Err(Error::Divergence { node })
    }
}

/// Velocity at `z` generated by `coefficients` carried by `controls`.
pub fn velocity(controls: &[Point], coefficients: &[Point], sigma: f64, z: &Point) -> Point {
    let inv = 1.0 / (sigma * sigma);
    controls
        .iter()
        .zip(coefficients)
        .fold(Point::zeros(), |acc, (x, a)| {
            acc + (-(x - z).norm_squared() * inv).exp() * a
        })
}

/// Euler integration of the control points. Returns `q + 1` snapshots;
/// `coefficients` must hold at least `q` nodes (a node `q` entry is unused).
pub fn flow_forward(source: &[Point], coefficients: &[Vec<Point>], q: usize, sigma: f64) -> Result<Vec<Vec<Point>>> {
    if q == 0 {
        return Err(Error::InvalidArgument("q must be at least 1".into()));
    }
    if coefficients.len() < q || coefficients.iter().any(|c| c.len() != source.len()) {
        return Err(Error::InvalidArgument(
            "coefficient array does not match the control points".into(),
        ));
    }
    let dt = 1.0 / q as f64;
    let mut traj = Vec::with_capacity(q + 1);
    traj.push(source.to_vec());
    for j in 0..q {
        let x = &traj[j];
        let v = KernelMatrix::new(x, sigma).apply(&coefficients[j]);
        let next: Vec<Point> = x.iter().zip(&v).map(|(p, vi)| p + dt * vi).collect();
        check_finite(&next, j + 1)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Passive transport of `tracers` along a control trajectory.
pub fn transport(
    trajectory: &[Vec<Point>],
    coefficients: &[Vec<Point>],
    sigma: f64,
    tracers: &[Point],
) -> Result<Vec<Vec<Point>>> {
    let q = trajectory.len() - 1;
    let dt = 1.0 / q as f64;
    let mut out = Vec::with_capacity(q + 1);
    out.push(tracers.to_vec());
    for j in 0..q {
        let next: Vec<Point> = out[j]
            .iter()
            .map(|z| z + dt * velocity(&trajectory[j], &coefficients[j], sigma, z))
            .collect();
        check_finite(&next, j + 1)?;
        out.push(next);
    }
    Ok(out)
}

/// Discrete kinetic energy `sum_{j<q} dt sum_{i,k} K(x_i^j, x_k^j) <a_i^j, a_k^j>`.
pub fn kinetic_energy(trajectory: &[Vec<Point>], coefficients: &[Vec<Point>], sigma: f64) -> f64 {
    let q = trajectory.len() - 1;
    let dt = 1.0 / q as f64;
    (0..q)
        .map(|j| dt * KernelMatrix::new(&trajectory[j], sigma).quad(&coefficients[j]))
        .sum()
}

/// The reduced registration objective `a -> kin(a) + lambda * HILB(x^q(a))`
/// with its adjoint gradient. The node-`q` coefficients do not enter.
pub struct ReducedObjective<'a> {
    pub source: &'a [Point],
    pub hilb: &'a HilbTerm,
    pub sigma: f64,
    pub lambda: f64,
    pub q: usize,
}

impl ReducedObjective<'_> {
    pub fn value(&self, a: &[Vec<Point>]) -> Result<f64> {
        let traj = flow_forward(self.source, a, self.q, self.sigma)?;
        Ok(kinetic_energy(&traj, a, self.sigma) + self.lambda * self.hilb.value(&traj[self.q]))
    }

    pub fn value_and_gradient(&self, a: &[Vec<Point>]) -> Result<(f64, Vec<Vec<Point>>)> {
        let q = self.q;
        let dt = 1.0 / q as f64;
        let s2 = self.sigma * self.sigma;
        let traj = flow_forward(self.source, a, q, self.sigma)?;
        let local = self.hilb.at(&traj[q]);
        let mut value = self.lambda * local.value();
        let mut p: Vec<Point> = local.gradient().into_iter().map(|g| self.lambda * g).collect();
        let m = self.source.len();
        let mut grad = vec![vec![Point::zeros(); m]; q + 1];
        for j in (0..q).rev() {
            let x = &traj[j];
            let aj = &a[j];
            let km = KernelMatrix::new(x, self.sigma);
            value += dt * km.quad(aj);
            let w: Vec<Point> = aj.iter().zip(&p).map(|(ai, pi)| 2.0 * ai + pi).collect();
            grad[j] = km.apply(&w).into_iter().map(|g| dt * g).collect();
            let mut p_new = p.clone();
            for i in 0..m {
                let row = km.row(i);
                let mut acc = Point::zeros();
                for k in 0..m {
                    if k == i {
                        continue;
                    }
                    let c = p[i].dot(&aj[k]) + p[k].dot(&aj[i]) + 2.0 * aj[i].dot(&aj[k]);
                    acc += (row[k] * c) * (x[i] - x[k]);
                }
                p_new[i] += (-2.0 * dt / s2) * acc;
            }
            p = p_new;
        }
        Ok((value, grad))
    }
}

/// Knobs of the registration solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub solver: SolverKind,
    pub q: usize,
    pub max_iterations: usize,
    /// Stop when the objective changes by less than this fraction.
    pub cost_tol: f64,
    /// Stop when the gradient norm falls below this fraction of the
    /// initial objective (L-BFGS).
    pub grad_tol: f64,
    pub lbfgs_memory: usize,
    /// L-BFGS runs on `b` with `a = K^{-1/2} b`, the kernel spectrum floored
    /// at this fraction of its largest eigenvalue. Plain coefficients if unset.
    pub precondition_floor: Option<f64>,
    pub min_iterations: usize,
    /// Iterations during which the penalty adapts to the residual balance.
    pub burn_in: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub newton_max_iter: usize,
    pub newton_tol: f64,
    pub krylov_tol: f64,
    pub krylov_max_iter: usize,
    /// Fixed ADMM penalty; derived from the initial matching gradient if unset.
    pub chi: Option<f64>,
    pub chi_factor: f64,
    /// Penalty on the non-terminal consensus copies, relative to `chi`.
    pub nonterminal_weight: f64,
    pub adaptive_chi: bool,
    pub trim_fraction: f64,
    /// Convergence when the censored Hausdorff mismatch falls below this
    /// multiple of the target's median edge length.
    pub threshold_factor: f64,
    /// Evenly spaced subsample of the source carrying the velocity field.
    pub max_control_points: Option<usize>,
    /// Evenly spaced subsample of the target used in the matching term.
    pub max_target_points: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            solver: SolverKind::Lbfgs,
            q: 4,
            max_iterations: 200,
            cost_tol: 1e-5,
            grad_tol: 1e-6,
            lbfgs_memory: 10,
            precondition_floor: Some(1e-6),
            min_iterations: 1,
            burn_in: 5,
            cg_tol: 1e-8,
            cg_max_iter: 500,
            newton_max_iter: 20,
            newton_tol: 1e-8,
            krylov_tol: 1e-6,
            krylov_max_iter: 100,
            chi: None,
            chi_factor: 10.0,
            nonterminal_weight: 0.0,
            adaptive_chi: true,
            trim_fraction: crate::surface::DEFAULT_TRIM,
            threshold_factor: 1.0,
            max_control_points: Some(150),
            max_target_points: Some(150),
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::InvalidArgument("q must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be positive".into()));
        }
        if !(self.cost_tol >= 0.0 && self.grad_tol >= 0.0) || self.lbfgs_memory == 0 {
            return Err(Error::InvalidArgument("tolerances must be nonnegative and memory positive".into()));
        }
        if !(0.0..1.0).contains(&self.trim_fraction) {
            return Err(Error::InvalidArgument("trim_fraction must lie in [0, 1)".into()));
        }
        if !(self.threshold_factor > 0.0) {
            return Err(Error::InvalidArgument("threshold_factor must be positive".into()));
        }
        if matches!(self.max_control_points, Some(0)) || matches!(self.max_target_points, Some(0)) {
            return Err(Error::InvalidArgument("subsample sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Indices of an evenly spaced subsample of `0..n` of size `min(n, max)`.
pub fn subsample_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// A registration flow: control trajectories and coefficients on `q + 1`
/// time nodes.
#[derive(Debug, Clone)]
pub struct DeformationFlow {
    /// Indices into the source grid of the control points.
    pub control_indices: Vec<usize>,
    pub control_points: Vec<Vec<Point>>,
    pub coefficients: Vec<Vec<Point>>,
    pub q: usize,
    pub sigma: f64,
    pub kinetic_energy: f64,
    pub terminal_mismatch: f64,
}

impl DeformationFlow {
    /// Identity flow on `controls`.
    pub fn identity(controls: Vec<Point>, control_indices: Vec<usize>, q: usize, sigma: f64) -> Self {
        let m = controls.len();
        Self {
            control_indices,
            control_points: vec![controls; q + 1],
            coefficients: vec![vec![Point::zeros(); m]; q + 1],
            q,
            sigma,
            kinetic_energy: 0.0,
            terminal_mismatch: 0.0,
        }
    }

    pub fn evaluate_velocity(&self, t_index: usize, z: &Point) -> Result<Point> {
        if t_index > self.q {
            return Err(Error::InvalidArgument(format!(
                "time node {t_index} outside 0..={}",
                self.q
            )));
        }
        Ok(velocity(
            &self.control_points[t_index],
            &self.coefficients[t_index],
            self.sigma,
            z,
        ))
    }

    /// Positions of `tracers` at every time node.
    pub fn transport(&self, tracers: &[Point]) -> Result<Vec<Vec<Point>>> {
        transport(&self.control_points, &self.coefficients, self.sigma, tracers)
    }

    /// `F_{t_j}(surface)` for time node `node`.
    pub fn deform_at(&self, surface: &RingSurface, node: usize) -> Result<RingSurface> {
        if node > self.q {
            return Err(Error::InvalidArgument(format!("time node {node} outside 0..={}", self.q)));
        }
        let mut traj = self.transport(surface.points())?;
        surface.with_points(traj.swap_remove(node))
    }

    /// Header `q sigma m kin mismatch`, then `node x y z a1 a2 a3` rows.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {}\n",
            self.q,
            self.sigma,
            self.control_indices.len(),
            self.kinetic_energy,
            self.terminal_mismatch
        );
        for (j, (xs, as_)) in self.control_points.iter().zip(&self.coefficients).enumerate() {
            for (x, a) in xs.iter().zip(as_) {
                s.push_str(&format!("{j} {} {} {} {} {} {}\n", x.x, x.y, x.z, a.x, a.y, a.z));
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub flow: DeformationFlow,
    /// The source surface carried to the final time node.
    pub deformed: RingSurface,
    pub converged: bool,
    pub iterations: usize,
    pub threshold: f64,
    pub symmetrized_kin: Option<f64>,
    pub history: Vec<IterationLog>,
}

/// Registers the point set `source` onto `target`. Velocity fields are
/// carried by the subsample of `source` selected by
/// `opts.max_control_points`; the full `source` is transported and
/// compared with the full `target` to certify convergence.
pub fn register_points(
    source: &[Point],
    target: &[Point],
    params: &KernelParams,
    opts: &SolverOptions,
    threshold: f64,
) -> Result<(DeformationFlow, Vec<Point>, bool, usize, Vec<IterationLog>)> {
    params.validate()?;
    opts.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptySet);
    }
    let ci = subsample_indices(source.len(), opts.max_control_points);
    let controls: Vec<Point> = ci.iter().map(|&i| source[i]).collect();
    let ti = subsample_indices(target.len(), opts.max_target_points);
    let hilb = HilbTerm::new(ti.iter().map(|&i| target[i]).collect(), params.tau)?;
    let q = opts.q;
    let mut out = match opts.solver {
        SolverKind::Lbfgs => {
            let obj = ReducedObjective {
                source: &controls,
                hilb: &hilb,
                sigma: params.sigma,
                lambda: params.lambda,
                q,
            };
            lbfgs::solve(&obj, opts)?
        }
        SolverKind::Admm => admm::solve(&admm::Problem {
            p: &controls,
            hilb: &hilb,
            sigma: params.sigma,
            lambda: params.lambda,
            opts,
        })?,
    };
    let traj = flow_forward(&controls, &out.a, q, params.sigma)?;
    let end = transport(&traj, &out.a, params.sigma, source)?.swap_remove(q);
    let mm = symmetric_trimmed_hausdorff(&end, target, opts.trim_fraction)?;
    if let Some(last) = out.history.last_mut() {
        last.mismatch = Some(mm);
    }
    let converged = mm <= threshold;
    if !out.stalled {
        log::debug!("registration hit the iteration cap after {} iterations", out.iterations);
    }
    let kin = kinetic_energy(&traj, &out.a, params.sigma);
    let flow = DeformationFlow {
        control_indices: ci,
        control_points: traj,
        coefficients: out.a,
        q,
        sigma: params.sigma,
        kinetic_energy: kin,
        terminal_mismatch: mm,
    };
    Ok((flow, end, converged, out.iterations, out.history))
}

/// Registers `source` onto `target`; convergence threshold is
/// `opts.threshold_factor` times the target's median edge length.
pub fn register(
    source: &RingSurface,
    target: &RingSurface,
    params: &KernelParams,
    opts: &SolverOptions,
) -> Result<RegistrationResult> {
    let threshold = opts.threshold_factor * target.mesh_size();
    let (flow, end, converged, iterations, history) =
        register_points(source.points(), target.points(), params, opts, threshold)?;
    if !converged {
        log::debug!(
            "registration {} -> {} ended with mismatch {:.4e} > {threshold:.4e}",
            source.id(),
            target.id(),
            flow.terminal_mismatch
        );
    }
    Ok(RegistrationResult {
        deformed: source.with_points(end)?,
        flow,
        converged,
        iterations,
        threshold,
        symmetrized_kin: None,
        history,
    })
}

/// `(KIN(S, T) + KIN(T, S)) / 2`; both directions must converge.
pub fn symmetrized_kin(
    s: &RingSurface,
    t: &RingSurface,
    params: &KernelParams,
    opts: &SolverOptions,
) -> Result<f64> {
    let run = |a: &RingSurface, b: &RingSurface, direction: &'static str| -> Result<f64> {
        let wrap = |e: Error| Error::Directional {
            direction,
            source: Box::new(e),
        };
        let r = register(a, b, params, opts).map_err(wrap)?;
        if !r.converged {
            return Err(wrap(Error::SolverFailure {
                iteration: r.iterations,
                reason: format!(
                    "no convergence: mismatch {:.4e} above threshold {:.4e}",
                    r.flow.terminal_mismatch, r.threshold
                ),
                dump: String::new(),
            }));
        }
        Ok(r.flow.kinetic_energy)
    };
    let forward = run(s, t, "forward")?;
    let backward = run(t, s, "backward")?;
    Ok(0.5 * (forward + backward))
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velocity_two_term() {
        let x = vec![Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0)];
        let a = vec![Point::new(1.0, 0.0, 0.0), Point::new(0.0, 2.0, 0.0)];
        let z = Point::new(0.5, 0.5, 0.0);
        let s: f64 = 0.8;
        let k1 = (-0.5f64 / (s * s)).exp();
        let expected = Point::new(k1, 2.0 * k1, 0.0);
        assert!((velocity(&x, &a, s, &z) - expected).norm() < 1e-15);
        assert_eq!(velocity(&x, &a, s, &x[0])[0], 1.0);
    }

    #[test]
    fn zero_coefficients_give_constant_trajectories() {
        let x: Vec<Point> = (0..5).map(|i| Point::new(i as f64, 0.5, -1.0)).collect();
        let a = vec![vec![Point::zeros(); 5]; 5];
        let traj = flow_forward(&x, &a, 4, 0.3).unwrap();
        assert!(traj.iter().all(|t| t == &x));
        assert_eq!(kinetic_energy(&traj, &a, 0.3), 0.0);
    }

    #[test]
    fn far_scale_kernel_translates() {
        let x: Vec<Point> = (0..4).map(|i| Point::new(0.01 * i as f64, 0.0, 0.0)).collect();
        let c = Point::new(0.1, -0.2, 0.05);
        // One non-zero coefficient with a huge kernel scale: near-constant field.
        let mut a = vec![vec![Point::zeros(); 4]; 4];
        for node in a.iter_mut() {
            node[0] = c;
        }
        let traj = flow_forward(&x, &a, 4, 1e3).unwrap();
        for (p0, p1) in x.iter().zip(&traj[4]) {
            assert!((p1 - p0 - c).norm() < 1e-6);
        }
    }

    #[test]
    fn subsample_is_even() {
        assert_eq!(subsample_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(subsample_indices(3, Some(5)), vec![0, 1, 2]);
        assert_eq!(subsample_indices(4, None).len(), 4);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = 8;
        let src: Vec<Point> = (0..m)
            .map(|_| Point::new(rng.random(), rng.random(), rng.random::<f64>() * 0.3))
            .collect();
        let tgt: Vec<Point> = src.iter().map(|p| p + Point::new(0.2, 0.1, 0.0)).collect();
        let hilb = HilbTerm::new(tgt, 0.4).unwrap();
        let obj = ReducedObjective {
            source: &src,
            hilb: &hilb,
            sigma: 0.5,
            lambda: 3.0,
            q: 2,
        };
        let a: Vec<Vec<Point>> = (0..3)
            .map(|_| (0..m).map(|_| Point::new(rng.random(), rng.random(), rng.random()) * 0.3).collect())
            .collect();
        let (v, g) = obj.value_and_gradient(&a).unwrap();
        assert!((v - obj.value(&a).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for j in 0..2 {
            for i in 0..m {
                for c in 0..3 {
                    let mut ap = a.clone();
                    ap[j][i][c] += h;
                    let mut am = a.clone();
                    am[j][i][c] -= h;
                    let fd = (obj.value(&ap).unwrap() - obj.value(&am).unwrap()) / (2.0 * h);
                    assert!((fd - g[j][i][c]).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {}", g[j][i][c]);
                }
            }
        }
        assert!(g[2].iter().all(|p| *p == Point::zeros()));
    }
}
