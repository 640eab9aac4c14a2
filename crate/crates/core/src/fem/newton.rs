//! Damped Newton iteration over residual/Jacobian callbacks.

use crate::error::{Error, Result};
use crate::fem::solver::{solve_linear, LinearSolverConfig};
use crate::fem::sparse::{norm2, CsrMatrix};

#[derive(Debug, Clone, Copy)]
pub struct NewtonConfig {
    /// Convergence on ||R(x)|| / ||R(x0)||.
    pub rel_tol: f64,
    /// Absolute floor; a residual below this counts as converged regardless
    /// of the initial residual (lets warm starts finish in zero iterations).
    pub abs_tol: f64,
    pub max_iter: usize,
    /// Step-halving attempts before declaring divergence.
    pub max_backtracks: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            rel_tol: 1e-5,
            abs_tol: 0.0,
            max_iter: 30,
            max_backtracks: 8,
        }
    }
}

/// Residual norms per iteration, starting with the initial residual.
#[derive(Debug, Clone)]
pub struct NewtonTrace {
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
}

/// Newton iteration with residual-norm backtracking. A step is halved when
/// the residual norm grows; more than `max_backtracks` halvings in one
/// iteration is divergence, distinct from running out of iterations.
pub fn newton_solve<R, J>(
    mut residual: R,
    mut jacobian: J,
    x0: &[f64],
    cfg: &NewtonConfig,
    lin_cfg: &LinearSolverConfig,
) -> Result<(Vec<f64>, NewtonTrace)>
where
    R: FnMut(&[f64]) -> Result<Vec<f64>>,
    J: FnMut(&[f64]) -> Result<CsrMatrix>,
{
    let mut x = x0.to_vec();
    let mut r = residual(&x)?;
    let mut rnorm = norm2(&r);
    if !rnorm.is_finite() {
        return Err(Error::NonFinite("initial Newton residual"));
    }
    let target = (cfg.rel_tol * rnorm).max(cfg.abs_tol);
    let mut trace = NewtonTrace {
        residual_norms: vec![rnorm],
        iterations: 0,
    };
    if rnorm <= target {
        return Ok((x, trace));
    }
    for it in 1..=cfg.max_iter {
        let jac = jacobian(&x)?;
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = solve_linear(&jac, &neg_r, lin_cfg)?.x;
        let mut alpha = 1.0;
        let mut backtracks = 0usize;
        let (x_new, r_new, rnorm_new) = loop {
            let x_try: Vec<f64> = x
                .iter()
                .zip(&delta)
                .map(|(xi, di)| xi + alpha * di)
                .collect();
            let r_try = residual(&x_try)?;
            let n_try = norm2(&r_try);
            if n_try.is_finite() && (n_try < rnorm || n_try <= target) {
                break (x_try, r_try, n_try);
            }
            backtracks += 1;
            if backtracks > cfg.max_backtracks {
                return Err(Error::NewtonDiverged {
                    iteration: it,
                    residual: n_try,
                    backtracks,
                });
            }
            alpha *= 0.5;
        };
        x = x_new;
        r = r_new;
        rnorm = rnorm_new;
        trace.residual_norms.push(rnorm);
        trace.iterations = it;
        if rnorm <= target {
            return Ok((x, trace));
        }
    }
    Err(Error::NewtonMaxIter {
        max_iter: cfg.max_iter,
        residual: rnorm / trace.residual_norms[0],
    })
}
