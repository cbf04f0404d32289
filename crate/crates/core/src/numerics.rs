//! Damped Newton iteration and central-difference derivatives.
//!
//! Every implicit construction in the crate (the midpoint equation, the
//! stationarity system of composition, the spherical root-finds) bottoms out
//! in [`solve_newton`] or in a chart-based loop built from [`fd_jacobian`]
//! and [`solve_dense`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jacobians whose condition estimate exceeds this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e13;

/// Smallest backtracking factor tried before a line search gives up.
const MIN_STEP_FRACTION: f64 = 1e-10;

/// Sufficient-decrease constant of the backtracking line search.
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Residual norm threshold.
    pub tol: f64,
    /// Maximum number of Newton steps.
    pub max_iter: usize,
    /// Backtracking factor of the line search, in (0, 1).
    pub damping: f64,
    /// Step of the central differences.
    pub fd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-12,
            max_iter: 50,
            damping: 0.5,
            fd_step: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidSpec("solver.tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidSpec("solver.max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::InvalidSpec("solver.damping must lie in (0, 1)".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::InvalidSpec("solver.fd_step must be positive".into()));
        }
        Ok(())
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_fd_step(mut self, fd_step: f64) -> Self {
        self.fd_step = fd_step;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

/// Why a Newton run stopped without meeting the tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveFailure {
    SingularJacobian,
    NoConvergence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Best iterate found (the root when `converged`).
    pub root: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub failure: Option<SolveFailure>,
}

impl SolveReport {
    /// Turns a non-converged report into the matching error.
    pub fn into_converged(self) -> Result<SolveReport> {
        match self.failure {
            None => Ok(self),
            Some(SolveFailure::SingularJacobian) => Err(Error::SingularJacobian {
                iteration: self.iterations,
            }),
            Some(SolveFailure::NoConvergence) => Err(Error::NoConvergence {
                iterations: self.iterations,
                residual_norm: self.residual_norm,
            }),
        }
    }
}

/// Damped Newton iteration with a finite-difference Jacobian.
///
/// Errors are returned only when the residual cannot be evaluated at an
/// accepted iterate; singular Jacobians and exhausted iteration budgets are
/// reported through [`SolveReport::failure`] together with the best iterate.
pub fn solve_newton<F>(residual: F, x0: &DVector<f64>, cfg: &SolverConfig) -> Result<SolveReport>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let h = cfg.fd_step;
    newton_loop(&residual, &|x: &DVector<f64>| fd_jacobian(&residual, x, h), x0, cfg)
}

/// Damped Newton iteration with an analytic Jacobian.
pub fn solve_newton_with_jacobian<F, J>(
    residual: F,
    jacobian: J,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SolveReport>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    newton_loop(&residual, &jacobian, x0, cfg)
}

fn newton_loop(
    residual: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    jacobian: &dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("newton initial guess"));
    }
    let mut x = x0.clone();
    let mut r = residual(&x)?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("newton residual"));
    }
    let mut norm = r.norm();

    let report = |root: DVector<f64>, norm: f64, it: usize, failure: Option<SolveFailure>| SolveReport {
        root,
        residual_norm: norm,
        iterations: it,
        converged: failure.is_none(),
        failure,
    };

    for it in 0..cfg.max_iter {
        if norm <= cfg.tol {
            return Ok(report(x, norm, it, None));
        }
        let jac = jacobian(&x)?;
        let step = match solve_dense(&jac, &(-&r)) {
            Some(step) => step,
            None => return Ok(report(x, norm, it, Some(SolveFailure::SingularJacobian))),
        };

        let mut t = 1.0;
        let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
        while t >= MIN_STEP_FRACTION {
            let trial = &x + &step * t;
            if let Ok(rt) = residual(&trial) {
                let nt = rt.norm();
                if nt.is_finite() {
                    if nt <= (1.0 - ARMIJO * t) * norm {
                        best = Some((nt, trial, rt));
                        break;
                    }
                    if best.as_ref().map_or(nt < norm, |b| nt < b.0) {
                        best = Some((nt, trial, rt));
                    }
                }
            }
            t *= cfg.damping;
        }
        match best {
            Some((nt, trial, rt)) => {
                x = trial;
                r = rt;
                norm = nt;
            }
            // no decrease along the Newton direction
            None => return Ok(report(x, norm, it + 1, Some(SolveFailure::NoConvergence))),
        }
    }
    if norm <= cfg.tol {
        Ok(report(x, norm, cfg.max_iter, None))
    } else {
        Ok(report(x, norm, cfg.max_iter, Some(SolveFailure::NoConvergence)))
    }
}

/// Central-difference Jacobian of `f` at `x` with step `h`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut probe = x.clone();
    for j in 0..n {
        let xj = x[j];
        probe[j] = xj + h;
        let fp = f(&probe)?;
        probe[j] = xj - h;
        let fm = f(&probe)?;
        probe[j] = xj;
        if fp.iter().chain(fm.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("fd_jacobian"));
        }
        if fp.len() != fm.len() {
            return Err(Error::DimensionMismatch {
                expected: fp.len(),
                got: fm.len(),
            });
        }
        cols.push((fp - fm) / (2.0 * h));
    }
    let m = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(m, n, |i, j| cols[j][i]))
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let xj = x[j];
        probe[j] = xj + h;
        let fp = f(&probe)?;
        probe[j] = xj - h;
        let fm = f(&probe)?;
        probe[j] = xj;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFiniteValue("fd_gradient"));
        }
        g[j] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// 2-norm condition number estimate from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max.is_finite() && min.is_finite()) {
        return f64::INFINITY;
    }
    if min == 0.0 {
        return f64::INFINITY;
    }
    max / min
}

/// Solves `a x = b`, returning `None` when `a` is not square or numerically
/// rank-deficient.
pub fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if !a.is_square() || a.nrows() != b.len() {
        return None;
    }
    if condition_number(a) > SINGULAR_CONDITION {
        return None;
    }
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}
