//! Matrix-free Krylov solvers and the space-time elliptic operator of the
//! potential update.
//!
//! The unknowns are the slices `φ^0 .. φ^{NT-1}`; `φ^{NT}` is the terminal
//! cost and enters through the right-hand side. The operator is
//! `r Λ*Λ` restricted to the unknown slices:
//!
//! ```text
//! (Au)^n_p = r/Δt² (time stencil) + 2r/h² Σ_{links p-q} (u^n_p - u^n_q)
//! ```
//!
//! where the time stencil is `u^0 - u^1` at `n = 0`,
//! `2u^n - u^{n-1} - u^{n+1}` inside and `2u^{NT-1} - u^{NT-2}` at the last
//! unknown slice.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::operators::{lambda_adjoint, ScalarField, Stacked5Field};

const CHUNK: usize = 4096;

/// Dot product with a reduction order fixed by the vector length only, so
/// results do not depend on the thread count.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A square linear map on `R^len`.
pub trait LinearOperator: Sync {
    fn len(&self) -> usize;

    fn apply(&self, x: &[f64], out: &mut [f64]);

    /// Diagonal entries, if cheaply available (used by Jacobi scaling).
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// `None` means ten times the number of unknowns
    pub max_iters: Option<usize>,
    pub jacobi: bool,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        KrylovConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-14,
            max_iters: None,
            jacobi: false,
        }
    }
}

impl KrylovConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Krylov tolerances must be positive (rel_tol = {}, abs_tol = {})",
                self.rel_tol, self.abs_tol
            )));
        }
        if self.max_iters == Some(0) {
            return Err(Error::InvalidParameter("Krylov iteration budget must be at least 1".into()));
        }
        Ok(())
    }

    fn budget(&self, n: usize) -> usize {
        self.max_iters.unwrap_or(10 * n.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Euclidean norm of `b - Ax`
    pub residual: f64,
}

/// The operator of the potential update.
#[derive(Debug, Clone, Copy)]
pub struct Step1Operator<'a> {
    geom: &'a Geometry,
    r: f64,
}

pub fn step1_operator(geom: &Geometry, r: f64) -> Step1Operator<'_> {
    Step1Operator { geom, r }
}

impl LinearOperator for Step1Operator<'_> {
    fn len(&self) -> usize {
        self.geom.nt() * self.geom.n_nodes()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let g = self.geom;
        let nodes = g.n_nodes();
        let nt = g.nt();
        let ct = self.r / (g.dt() * g.dt());
        let cs = 2.0 * self.r / (g.h() * g.h());
        out.par_chunks_mut(nodes).enumerate().for_each(|(n, chunk)| {
            let cur = &x[n * nodes..(n + 1) * nodes];
            let prev = (n > 0).then(|| &x[(n - 1) * nodes..n * nodes]);
            let next = (n + 1 < nt).then(|| &x[(n + 1) * nodes..(n + 2) * nodes]);
            for (p, o) in chunk.iter_mut().enumerate() {
                let u = cur[p];
                let time = match (prev, next) {
                    (None, Some(nx)) => u - nx[p],
                    (Some(pv), Some(nx)) => 2.0 * u - pv[p] - nx[p],
                    (Some(pv), None) => 2.0 * u - pv[p],
                    (None, None) => 2.0 * u,
                };
                let mut space = 0.0;
                for q in g.neighbors(p).iter().flatten() {
                    space += u - cur[*q];
                }
                *o = ct * time + cs * space;
            }
        });
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        let g = self.geom;
        let ct = self.r / (g.dt() * g.dt());
        let cs = 2.0 * self.r / (g.h() * g.h());
        let mut d = Vec::with_capacity(self.len());
        for n in 0..g.nt() {
            let t = if n == 0 { ct } else { 2.0 * ct };
            for p in 0..g.n_nodes() {
                let deg = g.neighbors(p).iter().flatten().count() as f64;
                d.push(t + cs * deg);
            }
        }
        Some(d)
    }
}

/// Right-hand side of the potential update: `Λ*(σ + r q)` on the unknown
/// slices, plus `m~0/Δt` on the first slice and `r u_T/Δt²` on the last.
pub fn step1_rhs(
    geom: &Geometry,
    r: f64,
    sigma: &Stacked5Field,
    q: &Stacked5Field,
    m0: &[f64],
    terminal: &[f64],
) -> Result<Vec<f64>> {
    let nodes = geom.n_nodes();
    for len in [m0.len(), terminal.len()] {
        if len != nodes {
            return Err(Error::ShapeMismatch {
                expected: nodes,
                got: len,
            });
        }
    }
    let combined = sigma.axpy(r, q)?;
    let adj = lambda_adjoint(geom, &combined)?;
    let nt = geom.nt();
    let mut b = adj.into_vec();
    b.truncate(nt * nodes);
    let dt = geom.dt();
    for p in 0..nodes {
        b[p] += m0[p] / dt;
        b[(nt - 1) * nodes + p] += r * terminal[p] / (dt * dt);
    }
    Ok(b)
}

/// The unknown slices `0..NT` of a full field, as one contiguous vector.
pub fn unknown_slices(phi: &ScalarField) -> &[f64] {
    let n = phi.nodes() * (phi.slices() - 1);
    &phi.as_slice()[..n]
}

fn residual_into(op: &dyn LinearOperator, x: &[f64], b: &[f64], r: &mut [f64]) {
    op.apply(x, r);
    r.par_iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
}

fn target(b: &[f64], config: &KrylovConfig) -> f64 {
    f64::max(config.rel_tol * norm2(b), config.abs_tol)
}

fn check_shapes(op: &dyn LinearOperator, b: &[f64], x0: &[f64]) -> Result<()> {
    for len in [b.len(), x0.len()] {
        if len != op.len() {
            return Err(Error::ShapeMismatch {
                expected: op.len(),
                got: len,
            });
        }
    }
    Ok(())
}

fn inverse_diagonal(op: &dyn LinearOperator, config: &KrylovConfig) -> Option<Vec<f64>> {
    if !config.jacobi {
        return None;
    }
    op.diagonal()
        .map(|d| d.into_iter().map(|v| if v != 0.0 { 1.0 / v } else { 1.0 }).collect())
}

fn precondition(inv_diag: &Option<Vec<f64>>, v: &[f64], out: &mut [f64]) {
    match inv_diag {
        Some(d) => out.par_iter_mut().zip(v).zip(d).for_each(|((o, a), s)| *o = a * s),
        None => out.copy_from_slice(v),
    }
}

enum Outcome {
    Converged,
    Breakdown,
    Budget,
}

/// One BiCGStab run from `x`; returns once converged, broken down or out of budget.
fn bicgstab_run(
    op: &dyn LinearOperator,
    b: &[f64],
    x: &mut [f64],
    inv_diag: &Option<Vec<f64>>,
    tol: f64,
    budget: usize,
    used: &mut usize,
) -> (Outcome, f64) {
    let n = b.len();
    let mut r = vec![0.0; n];
    residual_into(op, x, b, &mut r);
    let mut rnorm = norm2(&r);
    if rnorm <= tol {
        return (Outcome::Converged, rnorm);
    }
    let r_hat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let (mut rho_old, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let tiny = f64::EPSILON * f64::EPSILON;

    while *used < budget {
        *used += 1;
        let rho = dot(&r_hat, &r);
        if rho.abs() <= tiny * norm2(&r_hat) * rnorm || omega == 0.0 {
            return (Outcome::Breakdown, rnorm);
        }
        let beta = (rho / rho_old) * (alpha / omega);
        p.par_iter_mut()
            .zip(&r)
            .zip(&v)
            .for_each(|((pi, ri), vi)| *pi = ri + beta * (*pi - omega * vi));
        precondition(inv_diag, &p, &mut p_hat);
        op.apply(&p_hat, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 || !rv.is_finite() {
            return (Outcome::Breakdown, rnorm);
        }
        alpha = rho / rv;
        s.par_iter_mut()
            .zip(&r)
            .zip(&v)
            .for_each(|((si, ri), vi)| *si = ri - alpha * vi);
        let snorm = norm2(&s);
        if snorm <= tol {
            x.par_iter_mut().zip(&p_hat).for_each(|(xi, pi)| *xi += alpha * pi);
            return (Outcome::Converged, snorm);
        }
        precondition(inv_diag, &s, &mut s_hat);
        op.apply(&s_hat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return (Outcome::Breakdown, rnorm);
        }
        omega = dot(&t, &s) / tt;
        x.par_iter_mut()
            .zip(&p_hat)
            .zip(&s_hat)
            .for_each(|((xi, pi), si)| *xi += alpha * pi + omega * si);
        r.par_iter_mut()
            .zip(&s)
            .zip(&t)
            .for_each(|((ri, si), ti)| *ri = si - omega * ti);
        rnorm = norm2(&r);
        if rnorm <= tol {
            return (Outcome::Converged, rnorm);
        }
        rho_old = rho;
    }
    (Outcome::Budget, rnorm)
}

/// BiCGStab warm-started from `x0`. A breakdown restarts the method once from
/// the current iterate; a second breakdown is an error.
pub fn bicgstab_solve(
    op: &dyn LinearOperator,
    b: &[f64],
    x0: &[f64],
    config: &KrylovConfig,
) -> Result<KrylovSolution> {
    check_shapes(op, b, x0)?;
    config.validate()?;
    let tol = target(b, config);
    let budget = config.budget(b.len());
    let inv_diag = inverse_diagonal(op, config);
    let mut x = x0.to_vec();
    let mut used = 0;
    let mut restarted = false;
    loop {
        let (outcome, res) = bicgstab_run(op, b, &mut x, &inv_diag, tol, budget, &mut used);
        match outcome {
            Outcome::Converged => {
                return Ok(KrylovSolution {
                    x,
                    iterations: used,
                    residual: res,
                })
            }
            Outcome::Budget => {
                return Err(Error::KrylovNonConvergence {
                    iterations: used,
                    residual: res,
                    target: tol,
                })
            }
            Outcome::Breakdown if restarted => return Err(Error::KrylovBreakdown { iteration: used }),
            Outcome::Breakdown => {
                log::debug!("BiCGStab breakdown at iteration {used}, restarting");
                restarted = true;
            }
        }
    }
}

/// Preconditioned conjugate gradients, for symmetric positive definite operators.
pub fn cg_solve(op: &dyn LinearOperator, b: &[f64], x0: &[f64], config: &KrylovConfig) -> Result<KrylovSolution> {
    check_shapes(op, b, x0)?;
    config.validate()?;
    let tol = target(b, config);
    let budget = config.budget(b.len());
    let inv_diag = inverse_diagonal(op, config);
    let n = b.len();
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    residual_into(op, &x, b, &mut r);
    let mut rnorm = norm2(&r);
    let mut z = vec![0.0; n];
    precondition(&inv_diag, &r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut used = 0;
    while rnorm > tol {
        if used >= budget {
            return Err(Error::KrylovNonConvergence {
                iterations: used,
                residual: rnorm,
                target: tol,
            });
        }
        used += 1;
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::KrylovBreakdown { iteration: used });
        }
        let a = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += a * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= a * api);
        rnorm = norm2(&r);
        precondition(&inv_diag, &r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Ok(KrylovSolution {
        x,
        iterations: used,
        residual: rnorm,
    })
}
