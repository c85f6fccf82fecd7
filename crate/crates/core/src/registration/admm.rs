//! Consensus ADMM for the relaxed registration problem.
//!
//! The primal block `(x, a)` carries the kinetic energy and the Euler
//! constraint, linearized around the flow of the previous coefficients;
//! the consensus block `(x~, a~)` carries the matching term on the terminal
//! state. Scaled duals `(u, w)`.

use super::krylov::{self, dot, norm};
use super::{flow_forward, kinetic_energy, AdmmLog, IterationLog, KernelMatrix, Nodes, Outcome, SolverOptions};
use crate::error::{Error, Result};
use crate::kernel::HilbTerm;
use crate::surface::Point;


fn zeros(q: usize, m: usize) -> Nodes {
    vec![vec![Point::zeros(); m]; q + 1]
}

fn flat_sq(a: &Nodes, b: &Nodes) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, r)| (p - r).norm_squared()))
        .sum()
}

fn flat_norm_sq(a: &Nodes) -> f64 {
    a.iter().flat_map(|x| x.iter().map(|p| p.norm_squared())).sum()
}

fn all_finite(a: &Nodes) -> bool {
    a.iter().all(|x| x.iter().all(|p| p.iter().all(|c| c.is_finite())))
}

pub(super) struct Problem<'a> {
    pub p: &'a [Point],
    pub hilb: &'a HilbTerm,
    pub sigma: f64,
    pub lambda: f64,
    pub opts: &'a SolverOptions,
}

/// Step (ii) terminal subproblem: `min_z lambda*HILB(z) + chi/2 |z - v|^2`
/// by Newton–Krylov with Armijo backtracking.
fn prox_hilb(pb: &Problem, chi: f64, v: &[Point], z0: Vec<Point>) -> Vec<Point> {
    let lambda = pb.lambda;
    let phi = |local: &crate::kernel::HilbLocal, z: &[Point]| -> f64 {
        let d: f64 = z.iter().zip(v).map(|(a, b)| (a - b).norm_squared()).sum();
        lambda * local.value() + 0.5 * chi * d
    };
    let mut z = z0;
    let mut local = pb.hilb.at(&z);
    let mut f = phi(&local, &z);
    let mut g0 = None;
    for _ in 0..pb.opts.newton_max_iter {
        let g: Vec<Point> = local
            .gradient()
            .iter()
            .zip(z.iter().zip(v))
            .map(|(h, (zi, vi))| lambda * h + chi * (zi - vi))
            .collect();
        let gn = norm(&g);
        let g0n = *g0.get_or_insert(gn);
        if gn == 0.0 || gn <= pb.opts.newton_tol * g0n.max(1e-300) {
            break;
        }
        let d = krylov::newton_direction(
            |s: &[Point]| {
                local
                    .hessian_apply(s)
                    .iter()
                    .zip(s)
                    .map(|(h, si)| lambda * h + chi * si)
                    .collect()
            },
            &g,
            pb.opts.krylov_tol,
            pb.opts.krylov_max_iter,
        );
        let slope = dot(&g, &d);
        if !(slope < 0.0) {
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-10 {
            let trial: Vec<Point> = z.iter().zip(&d).map(|(zi, di)| zi + step * di).collect();
            let tl = pb.hilb.at(&trial);
            let ft = phi(&tl, &trial);
            if ft <= f + 1e-4 * step * slope {
                z = trial;
                local = tl;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    z
}

/// Step (i): minimize the linearized kinetic energy plus the proximal term
/// over the coefficients at nodes `0..q`; positions follow from the
/// linearized Euler recurrence. Returns the CG iteration count.
fn kinetic_step(
    pb: &Problem,
    kms: &[KernelMatrix],
    chi: f64,
    xhat: &Nodes,
    ahat: &Nodes,
    a: &mut Nodes,
    x: &mut Nodes,
) -> usize {
    let q = kms.len();
    let m = pb.p.len();
    let dt = 1.0 / q as f64;

    // Penalty weight per node: `chi` on the terminal state, `chi_nt` on the
    // non-terminal copies (positions and coefficients).
    let chi_nt = pb.opts.nonterminal_weight * chi;
    let wt = |j: usize| if j == q { chi } else { chi_nt };

    // Weighted suffix sums of (xhat^j - p) over j > l.
    let mut suffix = vec![vec![Point::zeros(); m]; q];
    let mut acc = vec![Point::zeros(); m];
    for l in (0..q).rev() {
        let j = l + 1;
        let c = wt(j);
        for ((ai, xh), p) in acc.iter_mut().zip(&xhat[j]).zip(pb.p) {
            *ai += c * (xh - p);
        }
        suffix[l].clone_from(&acc);
    }
    let mut rhs = Vec::with_capacity(q * m);
    for l in 0..q {
        let ks = kms[l].apply(&suffix[l]);
        rhs.extend(ahat[l].iter().zip(&ks).map(|(ah, k)| chi_nt * ah + dt * k));
    }

    let apply = |b: &[Point]| -> Vec<Point> {
        let ka: Vec<Vec<Point>> = (0..q).map(|l| kms[l].apply(&b[l * m..(l + 1) * m])).collect();
        // y^j = dt * sum_{l<j} K^l b^l, then S_l = sum_{j>l} w_j y^j.
        let mut y = vec![Point::zeros(); m];
        let mut ys = Vec::with_capacity(q);
        for kl in &ka {
            for (yi, ki) in y.iter_mut().zip(kl) {
                *yi += dt * ki;
            }
            ys.push(y.clone());
        }
        let mut s = vec![Point::zeros(); m];
        let mut ss = vec![Vec::new(); q];
        for l in (0..q).rev() {
            let c = wt(l + 1);
            for (si, yi) in s.iter_mut().zip(&ys[l]) {
                *si += c * yi;
            }
            ss[l] = s.clone();
        }
        let mut out = Vec::with_capacity(q * m);
        for l in 0..q {
            let ks = kms[l].apply(&ss[l]);
            out.extend((0..m).map(|i| 2.0 * dt * ka[l][i] + dt * ks[i] + chi_nt * b[l * m + i]));
        }
        out
    };
    let diag: Vec<f64> = (0..q)
        .flat_map(|l| {
            let rs = kms[l].row_sq_sums();
            let w: f64 = dt * dt * (l + 1..=q).map(wt).sum::<f64>();
            rs.into_iter().map(move |r| 2.0 * dt + chi_nt + w * r)
        })
        .collect();

    let mut sol: Vec<Point> = a[..q].iter().flatten().copied().collect();
    let out = krylov::pcg(apply, &diag, &rhs, &mut sol, pb.opts.cg_tol, pb.opts.cg_max_iter);

    if out.relative_residual > pb.opts.cg_tol {
        log::debug!(
            "kinetic subproblem: CG stopped at relative residual {:.2e} after {} iterations",
            out.relative_residual,
            out.iterations
        );
    }
    for l in 0..q {
        a[l].copy_from_slice(&sol[l * m..(l + 1) * m]);
    }
    a[q].clone_from(&ahat[q]);
    x[0].copy_from_slice(pb.p);
    for l in 0..q {
        let ka = kms[l].apply(&a[l]);
        let next: Vec<Point> = x[l].iter().zip(&ka).map(|(xi, ki)| xi + dt * ki).collect();
        x[l + 1] = next;
    }
    out.iterations
}

fn dump(it: usize, chi: f64, a: &Nodes, xt: &Nodes, u: &Nodes) -> String {
    format!(
        "iteration={it} chi={chi:e} |a|={:e} |x~|={:e} |u|={:e}",
        flat_norm_sq(a).sqrt(),
        flat_norm_sq(xt).sqrt(),
        flat_norm_sq(u).sqrt()
    )
}

/// Runs until the reduced objective stalls (relative change below
/// `cost_tol` on two consecutive iterations) or the iteration cap.
pub(super) fn solve(pb: &Problem) -> Result<Outcome> {
    let opts = pb.opts;
    let q = opts.q;
    let m = pb.p.len();
    let dt = 1.0 / q as f64;

    let mut a = zeros(q, m);
    let mut x: Nodes = vec![pb.p.to_vec(); q + 1];
    let mut at = a.clone();
    let mut xt = x.clone();
    let mut u = zeros(q, m);
    let mut w = zeros(q, m);

    let mut chi = match opts.chi {
        Some(c) => c,
        None => opts.chi_factor * pb.lambda * pb.hilb.curvature_scale(pb.p),
    };
    if !(chi > 0.0 && chi.is_finite()) {
        chi = 1.0;
    }

    let mut history = Vec::new();
    for it in 0..opts.max_iterations {
        let lin = flow_forward(pb.p, &a, q, pb.sigma).map_err(|e| Error::SolverFailure {
            iteration: it,
            reason: format!("linearization flow: {e}"),
            dump: dump(it, chi, &a, &xt, &u),
        })?;
        let kms: Vec<KernelMatrix> = lin[..q].iter().map(|xl| KernelMatrix::new(xl, pb.sigma)).collect();

        // (i)
        let xhat: Nodes = xt.iter().zip(&u).map(|(a, b)| a.iter().zip(b).map(|(p, r)| p + r).collect()).collect();
        let ahat: Nodes = at.iter().zip(&w).map(|(a, b)| a.iter().zip(b).map(|(p, r)| p + r).collect()).collect();
        let cg_iterations = kinetic_step(pb, &kms, chi, &xhat, &ahat, &mut a, &mut x);
        if !all_finite(&a) || !all_finite(&x) {
            return Err(Error::SolverFailure {
                iteration: it,
                reason: "non-finite iterate in the kinetic subproblem".into(),
                dump: dump(it, chi, &a, &xt, &u),
            });
        }

        // (ii)
        let xt_old = xt.clone();
        let at_old = at.clone();
        for j in 0..q {
            for i in 0..m {
                xt[j][i] = x[j][i] - u[j][i];
            }
        }
        for j in 0..=q {
            for i in 0..m {
                at[j][i] = a[j][i] - w[j][i];
            }
        }
        let v: Vec<Point> = x[q].iter().zip(&u[q]).map(|(p, r)| p - r).collect();
        xt[q] = prox_hilb(pb, chi, &v, std::mem::take(&mut xt[q]));
        if !all_finite(&xt) {
            return Err(Error::SolverFailure {
                iteration: it,
                reason: "non-finite iterate in the matching subproblem".into(),
                dump: dump(it, chi, &a, &xt, &u),
            });
        }

        // (iii)
        for j in 0..=q {
            for i in 0..m {
                u[j][i] += xt[j][i] - x[j][i];
                w[j][i] += at[j][i] - a[j][i];
            }
        }

        let primal = (flat_sq(&x, &xt) + flat_sq(&a, &at)).sqrt();
        let dual = chi * (flat_sq(&xt, &xt_old) + flat_sq(&at, &at_old)).sqrt();
        let kin_lin: f64 = (0..q).map(|l| dt * kms[l].quad(&a[l])).sum();
        let mut prox = 0.0;
        for j in 0..=q {
            for i in 0..m {
                prox += (x[j][i] - xt[j][i] - u[j][i]).norm_squared();
                prox += (a[j][i] - at[j][i] - w[j][i]).norm_squared();
            }
        }
        let augmented = kin_lin + pb.lambda * pb.hilb.value(&xt[q]) + 0.5 * chi * prox
            - 0.5 * chi * (flat_norm_sq(&u) + flat_norm_sq(&w));

        let traj = flow_forward(pb.p, &a, q, pb.sigma).map_err(|e| Error::SolverFailure {
            iteration: it,
            reason: format!("flow of the current coefficients: {e}"),
            dump: dump(it, chi, &a, &xt, &u),
        })?;
        let objective = kinetic_energy(&traj, &a, pb.sigma) + pb.lambda * pb.hilb.value(&traj[q]);

        let log = IterationLog {
            iteration: it,
            objective,
            gradient_norm: None,
            admm: Some(AdmmLog {
                augmented,
                primal_residual: primal,
                dual_residual: dual,
                chi,
                cg_iterations,
            }),
            mismatch: None,
        };
        log::trace!("{log:?}");
        history.push(log);
        let small = |k: usize| {
            let (f1, f0) = (history[k].objective, history[k - 1].objective);
            (f0 - f1).abs() <= opts.cost_tol * f0.abs().max(f64::MIN_POSITIVE)
        };
        if it + 1 >= opts.min_iterations.max(3) && small(it) && small(it - 1) {
            return Ok(Outcome {
                a,
                iterations: it + 1,
                stalled: true,
                history,
            });
        }

        if opts.adaptive_chi && it < opts.burn_in {
            let factor = if primal > 10.0 * dual {
                2.0
            } else if dual > 10.0 * primal {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                chi *= factor;
                for j in 0..=q {
                    for i in 0..m {
                        u[j][i] /= factor;
                        w[j][i] /= factor;
                    }
                }
            }
        }
    }
    Ok(Outcome {
        a,
        iterations: opts.max_iterations,
        stalled: false,
        history,
    })
}
