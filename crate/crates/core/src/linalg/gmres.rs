//! Restarted GMRES with modified Gram-Schmidt Arnoldi and Givens rotations.
//!
//! With a left preconditioner `M` the Arnoldi process runs on `M A`, but the
//! stopping test is always the unpreconditioned residual `‖A x − b‖₂`. If the
//! preconditioned estimate says "done" while the true residual is still above
//! tolerance, the inner tolerance is tightened and the solve restarts from
//! the current iterate.

use serde::{Deserialize, Serialize};

use super::{LinearOperator, Vector};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmresConfig {
    /// Absolute threshold on the residual 2-norm.
    pub tol: f64,
    /// Budget of operator applications (Arnoldi steps).
    pub max_iter: usize,
    /// Krylov dimension before restart; `None` never restarts.
    pub restart: Option<usize>,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            restart: None,
        }
    }
}

impl GmresConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || self.restart == Some(0) {
            return Err(Error::InvalidParams(format!(
                "gmres needs tol > 0, max_iter >= 1, restart >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GmresOutcome {
    pub x: Vector,
    /// Number of Arnoldi steps, i.e. applications of `M A`.
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `op x = rhs`, optionally left-preconditioned.
pub fn gmres(
    op: &dyn LinearOperator,
    rhs: &Vector,
    cfg: &GmresConfig,
    preconditioner: Option<&dyn LinearOperator>,
    x0: Option<&Vector>,
) -> Result<GmresOutcome> {
    cfg.validate()?;
    let n = op.rows();
    check_dim(n, op.cols(), "gmres needs a square operator")?;
    check_dim(n, rhs.len(), "gmres right-hand side")?;
    if let Some(m) = preconditioner {
        check_dim(n, m.rows(), "gmres preconditioner rows")?;
        check_dim(n, m.cols(), "gmres preconditioner cols")?;
    }

    let mut x = match x0 {
        Some(x0) => {
            check_dim(n, x0.len(), "gmres initial guess")?;
            x0.clone()
        }
        None => Vector::zeros(n),
    };
    let precondition = |v: Vector| -> Result<Vector> {
        match preconditioner {
            Some(m) => m.apply(&v),
            None => Ok(v),
        }
    };

    let mut iterations = 0usize;
    let mut inner_tol = cfg.tol;
    let mut residual = (rhs - op.apply(&x)?).norm();
    let mut stalled_cycles = 0usize;

    loop {
        if residual <= cfg.tol {
            return Ok(GmresOutcome {
                x,
                iterations,
                residual,
            });
        }
        if iterations >= cfg.max_iter {
            return Err(Error::NoConvergence {
                residual,
                iterations,
            });
        }

        let r = rhs - op.apply(&x)?;
        let r = precondition(r)?;
        let beta = r.norm();
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::SingularMatrix { pivot: beta });
        }

        let m = cfg
            .restart
            .unwrap_or(cfg.max_iter)
            .min(cfg.max_iter - iterations)
            .max(1);
        let mut basis: Vec<Vector> = Vec::with_capacity(m + 1);
        basis.push(r / beta);
        let mut hess = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;

        let mut k = 0usize;
        let mut breakdown = false;
        for j in 0..m {
            let mut w = precondition(op.apply(&basis[j])?)?;
            iterations += 1;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for (i, vi) in basis.iter().enumerate() {
                    let h = w.dot(vi);
                    hess[i][j] += h;
                    w.axpy(-h, vi, 1.0);
                }
            }
            let h_next = w.norm();
            hess[j + 1][j] = h_next;

            for i in 0..j {
                let t = cs[i] * hess[i][j] + sn[i] * hess[i + 1][j];
                hess[i + 1][j] = -sn[i] * hess[i][j] + cs[i] * hess[i + 1][j];
                hess[i][j] = t;
            }
            let (a, b) = (hess[j][j], hess[j + 1][j]);
            let rho = a.hypot(b);
            if rho == 0.0 {
                breakdown = true;
                k = j;
                break;
            }
            cs[j] = a / rho;
            sn[j] = b / rho;
            hess[j][j] = rho;
            hess[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            k = j + 1;

            let scale = hess[j][j].abs().max(1.0);
            if h_next <= 1e-14 * scale {
                breakdown = true;
                break;
            }
            if g[j + 1].abs() <= inner_tol || iterations >= cfg.max_iter {
                break;
            }
            basis.push(w / h_next);
        }

        if k > 0 {
            let mut y = vec![0.0; k];
            for i in (0..k).rev() {
                let mut s = g[i];
                for (l, yl) in y.iter().enumerate().skip(i + 1) {
                    s -= hess[i][l] * yl;
                }
                y[i] = s / hess[i][i];
            }
            for (i, yi) in y.iter().enumerate() {
                x.axpy(*yi, &basis[i], 1.0);
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gmres iterate"));
        }

        let new_residual = (rhs - op.apply(&x)?).norm();
        if new_residual <= cfg.tol {
            return Ok(GmresOutcome {
                x,
                iterations,
                residual: new_residual,
            });
        }
        if breakdown && new_residual > 0.5 * residual {
            // The Krylov space is invariant yet the residual survives: the
            // operator is (numerically) singular on it.
            return Err(Error::SingularMatrix {
                pivot: new_residual,
            });
        }
        if new_residual > 0.999 * residual {
            stalled_cycles += 1;
            if stalled_cycles >= 3 {
                return Err(Error::NoConvergence {
                    residual: new_residual,
                    iterations,
                });
            }
        } else {
            stalled_cycles = 0;
        }
        if preconditioner.is_some() {
            inner_tol = (inner_tol * 0.5 * cfg.tol / new_residual).max(f64::MIN_POSITIVE);
        }
        residual = new_residual;
    }
}
