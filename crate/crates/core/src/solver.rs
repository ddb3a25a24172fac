//! Matrix-free Krylov solvers for symmetric systems.
//!
//! [`minres`] handles indefinite and singular operators; on a consistent
//! singular system started from zero it stays in the range of the operator
//! and so returns the minimum-norm solution. [`cg`] requires positive
//! definiteness and reports a breakdown otherwise. Both accept a Jacobi
//! (diagonal) preconditioner.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::dot;

/// A symmetric linear map `x -> A x`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply(x, out)
    }
}

/// `|u·Av - v·Au|` relative to `|u| |Av| + |v| |Au|`.
pub fn symmetry_defect<A: LinearOperator + ?Sized>(op: &A, u: &[f64], v: &[f64]) -> f64 {
    let mut au = vec![0.0; u.len()];
    let mut av = vec![0.0; v.len()];
    op.apply(u, &mut au);
    op.apply(v, &mut av);
    let scale = norm(u) * norm(&av) + norm(v) * norm(&au);
    if scale == 0.0 {
        0.0
    } else {
        (dot(u, &av) - dot(v, &au)).abs() / scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIter,
    Breakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Minres,
    Cg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    None,
    Jacobi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub preconditioner: PreconditionerKind,
    /// Start each solve from the previous solution instead of zero.
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Minres,
            tolerance: 1e-5,
            max_iterations: 200,
            preconditioner: PreconditionerKind::None,
            warm_start: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("solver tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("solver max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Runtime preconditioner. `Jacobi` holds the diagonal of the operator.
#[derive(Clone, Debug, PartialEq)]
pub enum Preconditioner {
    None,
    Jacobi(Vec<f64>),
}

impl Preconditioner {
    fn solve(&self, r: &[f64], out: &mut [f64]) {
        match self {
            Preconditioner::None => out.copy_from_slice(r),
            Preconditioner::Jacobi(d) => {
                for ((o, &ri), &di) in out.iter_mut().zip(r).zip(d) {
                    *o = ri / di;
                }
            }
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if let Preconditioner::Jacobi(d) = self {
            crate::error::check_len("Jacobi diagonal", n, d.len())?;
            if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(
                    "Jacobi diagonal must be positive and finite".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `|A x - b| / |b|`, recomputed from the returned solution.
    pub final_relative_residual: f64,
    /// The solver's own running estimate at termination.
    pub estimated_relative_residual: f64,
    pub termination: Termination,
    /// Estimated relative residual after each iteration.
    pub residual_trace: Vec<f64>,
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn relative_residual<A: LinearOperator + ?Sized>(op: &A, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; x.len()];
    op.apply(x, &mut ax);
    let r: f64 = ax.iter().zip(b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let bn = norm(b);
    if bn == 0.0 {
        r
    } else {
        r / bn
    }
}

fn check_inputs<A: LinearOperator + ?Sized>(
    op: &A,
    rhs: &[f64],
    x0: &[f64],
    config: &SolverConfig,
    precond: &Preconditioner,
) -> Result<()> {
    config.validate()?;
    crate::error::check_len("right-hand side", op.dim(), rhs.len())?;
    crate::error::check_len("initial guess", op.dim(), x0.len())?;
    precond.check(op.dim())
}

fn finish<A: LinearOperator + ?Sized>(
    op: &A,
    rhs: &[f64],
    solution: Vec<f64>,
    iterations: usize,
    estimate: f64,
    termination: Termination,
    residual_trace: Vec<f64>,
) -> SolveResult {
    SolveResult {
        final_relative_residual: relative_residual(op, &solution, rhs),
        solution,
        iterations,
        estimated_relative_residual: estimate,
        termination,
        residual_trace,
    }
}

/// Preconditioned MINRES (Paige–Saunders recurrences).
///
/// Stops once the estimated residual, measured in the preconditioner's
/// inverse norm, falls to `tolerance` times that of `rhs`.
pub fn minres<A: LinearOperator + ?Sized>(
    op: &A,
    rhs: &[f64],
    x0: &[f64],
    config: &SolverConfig,
    precond: &Preconditioner,
) -> Result<SolveResult> {
    check_inputs(op, rhs, x0, config, precond)?;
    let n = op.dim();
    let mut x = x0.to_vec();
    if rhs.iter().all(|&v| v == 0.0) {
        return Ok(finish(op, rhs, x, 0, 0.0, Termination::Converged, vec![]));
    }

    let mut tmp = vec![0.0; n];
    precond.solve(rhs, &mut tmp);
    let b_norm = dot(rhs, &tmp).sqrt();

    let mut r1 = vec![0.0; n];
    op.apply(&x, &mut r1);
    for (r, &b) in r1.iter_mut().zip(rhs) {
        *r = b - *r;
    }
    let mut y = vec![0.0; n];
    precond.solve(&r1, &mut y);
    let beta1_sq = dot(&r1, &y);
    if !(beta1_sq >= 0.0) {
        return Ok(finish(op, rhs, x, 0, f64::NAN, Termination::Breakdown, vec![]));
    }
    let beta1 = beta1_sq.sqrt();
    if beta1 <= config.tolerance * b_norm {
        let est = beta1 / b_norm;
        return Ok(finish(op, rhs, x, 0, est, Termination::Converged, vec![]));
    }

    let mut r2 = r1.clone();
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut old_beta = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsilon = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut trace = Vec::new();

    for itn in 1..=config.max_iterations {
        let s = 1.0 / beta;
        for (vi, &yi) in v.iter_mut().zip(&y) {
            *vi = s * yi;
        }
        op.apply(&v, &mut y);
        if itn >= 2 {
            let f = beta / old_beta;
            for (yi, &ri) in y.iter_mut().zip(&r1) {
                *yi -= f * ri;
            }
        }
        let alpha = dot(&v, &y);
        let f = alpha / beta;
        for (yi, &ri) in y.iter_mut().zip(&r2) {
            *yi -= f * ri;
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        precond.solve(&r2, &mut y);
        old_beta = beta;
        let beta_sq = dot(&r2, &y);
        if !alpha.is_finite() || !(beta_sq >= 0.0) || !beta_sq.is_finite() {
            let est = trace.last().copied().unwrap_or(1.0);
            return Ok(finish(op, rhs, x, itn - 1, est, Termination::Breakdown, trace));
        }
        beta = beta_sq.sqrt();

        // previous rotation
        let old_epsilon = epsilon;
        let delta = cs * dbar + sn * alpha;
        let gbar = sn * dbar - cs * alpha;
        epsilon = sn * beta;
        dbar = -cs * beta;

        // next rotation
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        std::mem::swap(&mut w1, &mut w2);
        std::mem::swap(&mut w2, &mut w);
        for i in 0..n {
            w[i] = (v[i] - old_epsilon * w1[i] - delta * w2[i]) / gamma;
            x[i] += phi * w[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Ok(finish(
                op,
                rhs,
                x0.to_vec(),
                itn,
                f64::NAN,
                Termination::Breakdown,
                trace,
            ));
        }

        let est = phibar / b_norm;
        trace.push(est);
        if est <= config.tolerance || beta == 0.0 {
            return Ok(finish(op, rhs, x, itn, est, Termination::Converged, trace));
        }
    }
    let est = phibar / b_norm;
    Ok(finish(
        op,
        rhs,
        x,
        config.max_iterations,
        est,
        Termination::MaxIter,
        trace,
    ))
}

/// Preconditioned conjugate gradients for symmetric positive definite systems.
pub fn cg<A: LinearOperator + ?Sized>(
    op: &A,
    rhs: &[f64],
    x0: &[f64],
    config: &SolverConfig,
    precond: &Preconditioner,
) -> Result<SolveResult> {
    check_inputs(op, rhs, x0, config, precond)?;
    let n = op.dim();
    let mut x = x0.to_vec();
    let b_norm = norm(rhs);
    if b_norm == 0.0 {
        return Ok(finish(op, rhs, x, 0, 0.0, Termination::Converged, vec![]));
    }
    let mut r = vec![0.0; n];
    op.apply(&x, &mut r);
    for (ri, &b) in r.iter_mut().zip(rhs) {
        *ri = b - *ri;
    }
    let mut est = norm(&r) / b_norm;
    if est <= config.tolerance {
        return Ok(finish(op, rhs, x, 0, est, Termination::Converged, vec![]));
    }
    let mut z = vec![0.0; n];
    precond.solve(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut trace = Vec::new();

    for itn in 1..=config.max_iterations {
        op.apply(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) || !curvature.is_finite() {
            return Ok(finish(op, rhs, x, itn - 1, est, Termination::Breakdown, trace));
        }
        let a = rz / curvature;
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        est = norm(&r) / b_norm;
        trace.push(est);
        if !est.is_finite() {
            return Ok(finish(op, rhs, x0.to_vec(), itn, est, Termination::Breakdown, trace));
        }
        if est <= config.tolerance {
            return Ok(finish(op, rhs, x, itn, est, Termination::Converged, trace));
        }
        precond.solve(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(finish(
        op,
        rhs,
        x,
        config.max_iterations,
        est,
        Termination::MaxIter,
        trace,
    ))
}

/// Dispatches on `config.method`.
pub fn solve<A: LinearOperator + ?Sized>(
    op: &A,
    rhs: &[f64],
    x0: &[f64],
    config: &SolverConfig,
    precond: &Preconditioner,
) -> Result<SolveResult> {
    match config.method {
        SolverMethod::Minres => minres(op, rhs, x0, config, precond),
        SolverMethod::Cg => cg(op, rhs, x0, config, precond),
    }
}
