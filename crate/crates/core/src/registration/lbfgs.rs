//! Limited-memory BFGS on the reduced objective. Only the coefficients of
//! nodes `0..q` are free; node `q` carries no motion and stays zero.

use std::sync::{Arc, Mutex};

use argmin::core::observers::{Observe, ObserverMode};
use argmin::core::{CostFunction, Executor, Gradient, IterState, State, KV};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;

use nalgebra::{DMatrix, SymmetricEigen};

use super::{IterationLog, KernelMatrix, Nodes, Outcome, ReducedObjective, SolverOptions};
use crate::error::{Error, Result};
use crate::surface::Point;

fn flatten(a: &Nodes, q: usize) -> Vec<f64> {
    a[..q].iter().flatten().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(v: &[f64], q: usize, m: usize) -> Nodes {
    let mut a: Nodes = v
        .chunks_exact(3 * m)
        .map(|c| c.chunks_exact(3).map(|p| Point::new(p[0], p[1], p[2])).collect())
        .collect();
    a.push(vec![Point::zeros(); m]);
    debug_assert_eq!(a.len(), q + 1);
    a
}

/// `K^{-1/2}` for the kernel matrix of the source controls, with the
/// spectrum floored at `floor * max eigenvalue`. Optimizing `b` with
/// `a = P b` makes the kinetic term close to `|b|^2`.
struct Precond {
    p: DMatrix<f64>,
}

impl Precond {
    fn new(x: &[Point], sigma: f64, floor: f64) -> Self {
        let m = x.len();
        let k = KernelMatrix::new(x, sigma);
        let km = DMatrix::from_fn(m, m, |i, j| k.row(i)[j]);
        let eig = SymmetricEigen::new(km);
        let top = eig.eigenvalues.max();
        let s = eig.eigenvalues.map(|mu| 1.0 / mu.max(floor * top).sqrt());
        let p = &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose();
        Self { p }
    }

    /// Applies `P` to every node of a flattened parameter vector.
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let m = self.p.nrows();
        let mut out = Vec::with_capacity(v.len());
        for node in v.chunks_exact(3 * m) {
            let x = DMatrix::from_row_slice(m, 3, node);
            let y = &self.p * x;
            for i in 0..m {
                out.extend_from_slice(&[y[(i, 0)], y[(i, 1)], y[(i, 2)]]);
            }
        }
        out
    }
}

/// The line search asks for the cost and then the gradient at the same
/// point; both come from one evaluation kept in `last`.
struct Flat<'a> {
    obj: &'a ReducedObjective<'a>,
    m: usize,
    precond: Option<Precond>,
    last: Mutex<Option<(Vec<f64>, f64, Vec<f64>)>>,
}

impl Flat<'_> {
    fn coefficients(&self, p: &[f64]) -> Nodes {
        match &self.precond {
            Some(pc) => unflatten(&pc.apply(p), self.obj.q, self.m),
            None => unflatten(p, self.obj.q, self.m),
        }
    }

    fn eval(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut last = self.last.lock().expect("evaluation cache lock");
        if let Some((x, f, g)) = last.as_ref() {
            if x.as_slice() == p {
                return Ok((*f, g.clone()));
            }
        }
        let (f, g) = self.obj.value_and_gradient(&self.coefficients(p))?;
        let mut g = flatten(&g, self.obj.q);
        if let Some(pc) = &self.precond {
            g = pc.apply(&g);
        }
        *last = Some((p.to_vec(), f, g.clone()));
        Ok((f, g))
    }
}

impl CostFunction for Flat<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p)?.0)
    }
}

impl Gradient for Flat<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p)?.1)
    }
}

type St = IterState<Vec<f64>, Vec<f64>, (), (), (), f64>;

struct Recorder(Arc<Mutex<Vec<IterationLog>>>);

impl Observe<St> for Recorder {
    fn observe_iter(&mut self, state: &St, _kv: &KV) -> std::result::Result<(), argmin::core::Error> {
        let gn = state.get_gradient().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt());
        self.0.lock().expect("recorder lock").push(IterationLog {
            iteration: state.get_iter() as usize,
            objective: state.get_cost(),
            gradient_norm: gn,
            admm: None,
            mismatch: None,
        });
        Ok(())
    }
}

pub(super) fn solve(obj: &ReducedObjective, opts: &SolverOptions) -> Result<Outcome> {
    let (q, m) = (obj.q, obj.source.len());
    let x0 = vec![0.0; 3 * q * m];
    let f0 = obj.value(&unflatten(&x0, q, m))?;
    let fail = |reason: String| Error::SolverFailure {
        iteration: 0,
        reason,
        dump: String::new(),
    };
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), opts.lbfgs_memory)
        .with_tolerance_grad(opts.grad_tol * f0.max(f64::MIN_POSITIVE))
        .and_then(|s| s.with_tolerance_cost(opts.cost_tol * f0))
        .map_err(|e| fail(e.to_string()))?;
    let log = Arc::new(Mutex::new(Vec::new()));
    let flat = Flat {
        obj,
        m,
        precond: opts.precondition_floor.map(|fl| Precond::new(obj.source, obj.sigma, fl)),
        last: Mutex::new(None),
    };
    let res = Executor::new(flat, solver)
        .configure(|s| s.param(x0).max_iters(opts.max_iterations as u64))
        .add_observer(Recorder(Arc::clone(&log)), ObserverMode::Always)
        .run()
        .map_err(|e| match e.downcast::<Error>() {
            Ok(inner) => inner,
            Err(e) => fail(e.to_string()),
        })?;
    let state = res.state();
    let flat = res.problem().problem.as_ref().ok_or_else(|| fail("problem lost".into()))?;
    let best = state.get_best_param().ok_or_else(|| fail("no iterate".into()))?;
    if !state.get_best_cost().is_finite() {
        return Err(fail("non-finite objective".into()));
    }
    let iterations = state.get_iter() as usize;
    let history = std::mem::take(&mut *log.lock().expect("recorder lock"));
    Ok(Outcome {
        a: flat.coefficients(best),
        iterations,
        stalled: state.get_termination_status().terminated()
            && iterations < opts.max_iterations,
        history,
    })
}
