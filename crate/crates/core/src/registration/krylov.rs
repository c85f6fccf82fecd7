//! Matrix-free Krylov solvers on vectors of 3D points.

use crate::surface::Point;

pub(crate) fn dot(a: &[Point], b: &[Point]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

pub(crate) fn norm(a: &[Point]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn axpy(alpha: f64, x: &[Point], y: &mut [Point]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator. `diag`
/// holds one positive preconditioner entry per point (shared by the three
/// coordinates). `x` carries the warm start and receives the solution.
pub(crate) fn pcg(
    apply: impl Fn(&[Point]) -> Vec<Point>,
    diag: &[f64],
    b: &[Point],
    x: &mut Vec<Point>,
    tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|p| *p = Point::zeros());
        return CgOutcome {
            iterations: 0,
            relative_residual: 0.0,
        };
    }
    let ax = apply(x);
    let mut r: Vec<Point> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<Point> = r.iter().zip(diag).map(|(ri, d)| ri / *d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = norm(&r) / bnorm;
    let mut it = 0;
    while it < max_iter && rel > tol {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        rel = norm(&r) / bnorm;
        it += 1;
        if rel <= tol {
            break;
        }
        for ((zi, ri), d) in z.iter_mut().zip(&r).zip(diag) {
            *zi = ri / *d;
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    CgOutcome {
        iterations: it,
        relative_residual: rel,
    }
}

/// Truncated CG for the Newton system `H d = -g` (Steihaug): stops at the
/// first direction of non-positive curvature and returns the iterate so
/// far, or the steepest-descent direction if that happens immediately.
pub(crate) fn newton_direction(
    hess: impl Fn(&[Point]) -> Vec<Point>,
    g: &[Point],
    tol: f64,
    max_iter: usize,
) -> Vec<Point> {
    let n = g.len();
    let gnorm = norm(g);
    let mut d = vec![Point::zeros(); n];
    let mut r: Vec<Point> = g.iter().map(|x| -x).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for k in 0..max_iter {
        let hp = hess(&p);
        let php = dot(&p, &hp);
        if php <= 0.0 {
            if k == 0 {
                return r;
            }
            break;
        }
        let alpha = rr / php;
        axpy(alpha, &p, &mut d);
        axpy(-alpha, &hp, &mut r);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * gnorm {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    d
}
