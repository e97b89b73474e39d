//! Gradients of `log|det J^{OO}(x)|` with respect to the latent point.
//!
//! Both stochastic estimators reduce to bilinear terms `c · aᵀ J(x) b` whose
//! vectors `a`, `b` are detached snapshots; only `J(x)` is differentiated.
//!
//! * NLADE: `Tr((J^{OO})⁻¹ dJ^{OO})` with one Rademacher probe `z` per draw,
//!   `a = scatter_{O_y}((J^{OO})⁻ᵀ z)` and `b = scatter_{O_x}(z)`.
//! * CLADE: `log|det J^{OO}| = log|det G^{HH}(f(x))| + log|det J(x)|`. With
//!   `dG = −G dJ G` the first trace becomes `−(Gᵀ e_H u)ᵀ dJ (G e_H z_H)` for
//!   `u = (G^{HH})⁻ᵀ z_H`, which needs only a `d^H × d^H` solve.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{Flow, FlowGrads};
use crate::linalg::{gmres, summarize, Adjoint, Counted, GmresConfig, Vector};
use crate::partition::{scatter, InverseStrategy, PartitionPair, PartitionedJacobian};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadEstimator {
    #[default]
    Nlade,
    Clade,
    /// Dense sub-determinant gradient; desk-scale reference.
    Exact,
}

/// Settings for the `J^{OO}` solves inside the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockSolverConfig {
    pub strategy: InverseStrategy,
    pub gmres: GmresConfig,
}

/// Work done by the inner linear solves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LadStats {
    /// Size of the system solved per probe (`d^O` for NLADE, `d^H` for CLADE).
    pub inner_dim: usize,
    pub gmres_iterations: usize,
    pub operator_applications: usize,
}

impl LadStats {
    fn add(&mut self, other: LadStats) {
        self.inner_dim = other.inner_dim;
        self.gmres_iterations += other.gmres_iterations;
        self.operator_applications += other.operator_applications;
    }
}

#[derive(Debug, Clone)]
pub struct LadGradient {
    pub mean: Vector,
    /// Per-coordinate standard error over probes.
    pub std_err: Vector,
    pub n_probes: usize,
    pub stats: LadStats,
}

/// A term `coef · aᵀ J(x) b`.
pub(crate) struct Bilinear {
    pub coef: f64,
    pub a: Vector,
    pub b: Vector,
}

pub(crate) fn probe_terms<R: Rng + ?Sized>(
    pj: &PartitionedJacobian<'_>,
    estimator: LadEstimator,
    solver: &BlockSolverConfig,
    rng: &mut R,
) -> Result<(Vec<Bilinear>, LadStats)> {
    let pair = pj.pair();
    let lin = pj.linearization();
    let d = lin.dim();
    match estimator {
        LadEstimator::Nlade => {
            let z = rng::rademacher(rng, pair.data.d_observed());
            let u = pj.solve_oo_adjoint(&z, solver.strategy, &solver.gmres)?;
            let terms = vec![Bilinear {
                coef: 1.0,
                a: scatter(&u.x, pair.data.observed(), d),
                b: scatter(&z, pair.latent.observed(), d),
            }];
            let stats = LadStats {
                inner_dim: pair.data.d_observed(),
                gmres_iterations: u.iterations,
                operator_applications: u.applications,
            };
            Ok((terms, stats))
        }
        LadEstimator::Clade => {
            let z_h = rng::rademacher(rng, pair.data.d_hidden());
            let z = rng::rademacher(rng, d);
            let g_hh = Counted::new(pj.g_hh());
            let u = gmres(&Adjoint(&g_hh), &z_h, &solver.gmres, None, None).map_err(|e| match e {
                Error::SingularMatrix { pivot } => {
                    Error::SingularSubJacobian(format!("G^HH solve broke down ({pivot:.3e})"))
                }
                other => other,
            })?;
            let a1 = lin.inv_vjp(&scatter(&u.x, pair.latent.hidden(), d))?;
            let b1 = lin.inv_jvp(&scatter(&z_h, pair.data.hidden(), d))?;
            let b2 = lin.inv_jvp(&z)?;
            let terms = vec![
                Bilinear {
                    coef: -1.0,
                    a: a1,
                    b: b1,
                },
                Bilinear { coef: 1.0, a: z, b: b2 },
            ];
            let stats = LadStats {
                inner_dim: pair.data.d_hidden(),
                gmres_iterations: u.iterations,
                operator_applications: g_hh.count(),
            };
            Ok((terms, stats))
        }
        LadEstimator::Exact => unreachable!("exact gradient has no probe terms"),
    }
}

/// `∇ₓ log|det J^{OO}(x)|` averaged over `n_probes`, with the parameter
/// gradient when asked. One reverse sweep regardless of the probe count.
pub fn lad_gradient_at<R: Rng + ?Sized>(
    pj: &PartitionedJacobian<'_>,
    estimator: LadEstimator,
    n_probes: usize,
    solver: &BlockSolverConfig,
    rng: &mut R,
    want_params: bool,
) -> Result<(Vector, Option<FlowGrads>, LadStats)> {
    let lin = pj.linearization();
    let pair = pj.pair();
    if estimator == LadEstimator::Exact {
        let (_, grad, params) = lin.sub_logabsdet_grad(pair.data.observed(), pair.latent.observed(), want_params)?;
        return Ok((grad, params, LadStats::default()));
    }
    let n = n_probes.max(1);
    let mut seeds = lin.empty_seeds();
    let mut stats = LadStats::default();
    for _ in 0..n {
        let (terms, s) = probe_terms(pj, estimator, solver, rng)?;
        stats.add(s);
        for t in terms {
            lin.push_bilinear(&mut seeds, t.coef / n as f64, &t.a, &t.b);
        }
    }
    let (grad, params) = lin.reverse_sweep(None, &seeds, want_params);
    Ok((grad, params, stats))
}

fn estimate(
    flow: &Flow,
    x: &Vector,
    pair: &PartitionPair,
    estimator: LadEstimator,
    n_probes: usize,
    rng_seed: u64,
    solver: &BlockSolverConfig,
) -> Result<LadGradient> {
    let pj = PartitionedJacobian::new(flow, x, pair)?;
    let lin = pj.linearization();
    let d = flow.dim();
    let mut g = rng::seeded(rng_seed);
    let mut samples: Vec<Vector> = Vec::with_capacity(n_probes);
    let mut stats = LadStats::default();
    for _ in 0..n_probes {
        let (terms, s) = probe_terms(&pj, estimator, solver, &mut g)?;
        stats.add(s);
        let mut sample = Vector::zeros(d);
        for t in terms {
            sample += lin.bilinear_grad(&t.a, &t.b)? * t.coef;
        }
        samples.push(sample);
    }
    let mut mean = Vector::zeros(d);
    let mut std_err = Vector::zeros(d);
    for i in 0..d {
        let column: Vec<f64> = samples.iter().map(|s| s[i]).collect();
        let s = summarize(&column);
        mean[i] = s.mean;
        std_err[i] = s.std_err;
    }
    Ok(LadGradient {
        mean,
        std_err,
        n_probes,
        stats,
    })
}

/// Natural estimator of `∇ₓ log|det J^{OO}(x)|`.
pub fn nlade_grad(flow: &Flow, x: &Vector, pair: &PartitionPair, n_probes: usize, rng_seed: u64) -> Result<LadGradient> {
    nlade_grad_with(flow, x, pair, n_probes, rng_seed, &BlockSolverConfig::default())
}

pub fn nlade_grad_with(
    flow: &Flow,
    x: &Vector,
    pair: &PartitionPair,
    n_probes: usize,
    rng_seed: u64,
    solver: &BlockSolverConfig,
) -> Result<LadGradient> {
    estimate(flow, x, pair, LadEstimator::Nlade, n_probes, rng_seed, solver)
}

/// Corrected estimator of `∇ₓ log|det J^{OO}(x)|`.
pub fn clade_grad(flow: &Flow, x: &Vector, pair: &PartitionPair, n_probes: usize, rng_seed: u64) -> Result<LadGradient> {
    clade_grad_with(flow, x, pair, n_probes, rng_seed, &BlockSolverConfig::default())
}

pub fn clade_grad_with(
    flow: &Flow,
    x: &Vector,
    pair: &PartitionPair,
    n_probes: usize,
    rng_seed: u64,
    solver: &BlockSolverConfig,
) -> Result<LadGradient> {
    estimate(flow, x, pair, LadEstimator::Clade, n_probes, rng_seed, solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowShape;
    use crate::linalg::{dense_logabsdet, finite_diff_jacobian, Matrix};
    use crate::partition::make_partition;

    fn setup(seed: u64) -> (Flow, Vector, PartitionPair) {
        let mut shape = FlowShape::new(4);
        shape.layers = 3;
        shape.hidden = 8;
        shape.init_scale = 2.0;
        let f = Flow::random(&shape, &mut rng::seeded(seed));
        let x = rng::standard_normal(&mut rng::seeded(seed + 1), 4);
        let pair = PartitionPair::new(make_partition(&[0, 3], 4).unwrap(), make_partition(&[1, 3], 4).unwrap()).unwrap();
        (f, x, pair)
    }

    fn dense_grad(f: &Flow, x: &Vector, pair: &PartitionPair) -> Vector {
        finite_diff_jacobian(
            |p| {
                let l = f.linearize(p).unwrap();
                let j = l.sub_jacobian(pair.data.observed(), pair.latent.observed());
                Vector::from_element(1, dense_logabsdet(&j).unwrap())
            },
            x,
            1e-6,
        )
        .row(0)
        .transpose()
    }

    #[test]
    fn identity_flow_gives_zero() {
        let f = Flow::identity(4, 2, 3);
        let pair = PartitionPair::aligned(make_partition(&[0, 1], 4).unwrap());
        let x = Vector::from_element(4, 0.7);
        assert_eq!(nlade_grad(&f, &x, &pair, 5, 1).unwrap().mean, Vector::zeros(4));
        assert_eq!(clade_grad(&f, &x, &pair, 5, 1).unwrap().mean, Vector::zeros(4));
    }

    #[test]
    fn linear_flow_gives_exactly_zero() {
        let mut g = rng::seeded(2);
        let w1 = Matrix::from_column_slice(4, 4, rng::standard_normal(&mut g, 16).as_slice()) * 0.2;
        let w2 = Matrix::from_column_slice(4, 4, rng::standard_normal(&mut g, 16).as_slice()) * 0.2;
        let f = Flow::linear_from_layers(4, vec![(w1, w2)]).unwrap();
        let pair = PartitionPair::aligned(make_partition(&[0, 2], 4).unwrap());
        let x = rng::standard_normal(&mut g, 4);
        for n in [1, 7] {
            assert_eq!(nlade_grad(&f, &x, &pair, n, 3).unwrap().mean, Vector::zeros(4));
        }
    }

    #[test]
    fn exact_matches_finite_differences() {
        let (f, x, pair) = setup(4);
        let pj = PartitionedJacobian::new(&f, &x, &pair).unwrap();
        let cfg = BlockSolverConfig::default();
        let (g, _, _) = lad_gradient_at(&pj, LadEstimator::Exact, 1, &cfg, &mut rng::seeded(0), false).unwrap();
        let fd = dense_grad(&f, &x, &pair);
        assert!((g - &fd).amax() < 1e-6 * fd.amax().max(1.0));
    }

    #[test]
    fn stochastic_estimators_are_unbiased() {
        let (f, x, pair) = setup(6);
        let fd = dense_grad(&f, &x, &pair);
        for est in [
            nlade_grad(&f, &x, &pair, 4000, 7).unwrap(),
            clade_grad(&f, &x, &pair, 4000, 8).unwrap(),
        ] {
            for i in 0..4 {
                let tol = 4.0 * est.std_err[i] + 1e-6;
                assert!((est.mean[i] - fd[i]).abs() < tol, "coord {i}: {} vs {}", est.mean[i], fd[i]);
            }
        }
    }

    #[test]
    fn clade_inner_solve_is_small() {
        let (f, x, _) = setup(9);
        let pair = PartitionPair::aligned(make_partition(&[0, 1, 2], 4).unwrap());
        let c = clade_grad(&f, &x, &pair, 3, 1).unwrap();
        assert_eq!(c.stats.inner_dim, 1);
        let n = nlade_grad(&f, &x, &pair, 3, 1).unwrap();
        assert_eq!(n.stats.inner_dim, 3);
    }
}
