use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lad::{lad_gradient_at, BlockSolverConfig, LadEstimator, LadStats};
use super::posterior::{posterior_sample, PosteriorDraw, VariationalPosterior};
use crate::error::{check_dim, Error, Result};
use crate::flows::{Flow, FlowGrads};
use crate::linalg::{dense_logabsdet, summarize, LinearOperator, Vector};
use crate::partition::{scatter, PartitionPair, PartitionedJacobian};
use crate::solvers::{solve_constraint, FixedPointConfig, NewtonKrylovConfig, SolveResult};

use crate::numerics::log_std_normal;

/// Largest tolerated fraction of draws whose constraint solve fails.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub fixed_point: FixedPointConfig,
    pub newton_krylov: NewtonKrylovConfig,
}

impl SolverSettings {
    pub fn solve(&self, flow: &Flow, y_o: &Vector, x_h: &Vector, pair: &PartitionPair) -> Result<SolveResult> {
        solve_constraint(flow, y_o, x_h, pair, &self.fixed_point, &self.newton_krylov)
    }

    pub fn block_solver(&self) -> BlockSolverConfig {
        BlockSolverConfig {
            strategy: self.newton_krylov.inverse_strategy,
            gmres: self.newton_krylov.gmres,
        }
    }
}

/// The four terms of `log p(y)` split along a partition pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointLogpdf {
    /// `log p₀(x^H)`
    pub hidden_prior: f64,
    /// `log|det G^{HH}|`
    pub g_hh_term: f64,
    /// `log p₀(x^O)`
    pub observed_prior: f64,
    /// `−log|det J^{OO}|`
    pub lad_term: f64,
    pub total: f64,
}

/// `log p(f(x))` through the block determinants, evaluated densely.
pub fn partitioned_joint_logpdf(flow: &Flow, x_o: &Vector, x_h: &Vector, pair: &PartitionPair) -> Result<JointLogpdf> {
    let x = pair.latent.join(x_o, x_h)?;
    let blocks = PartitionedJacobian::new(flow, &x, pair)?.dense()?;
    let sub = |m| dense_logabsdet(m).map_err(|e| Error::SingularSubJacobian(e.to_string()));
    let hidden_prior = log_std_normal(x_h);
    let observed_prior = log_std_normal(x_o);
    let g_hh_term = sub(&blocks.g_hh)?;
    let lad_term = -sub(&blocks.j_oo)?;
    Ok(JointLogpdf {
        hidden_prior,
        g_hh_term,
        observed_prior,
        lad_term,
        total: hidden_prior + g_hh_term + observed_prior + lad_term,
    })
}

/// Per-draw ELBO integrand split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ElboTerms {
    /// `log p₀(x^H)`
    pub prior: f64,
    /// `−log q(x^H)`
    pub entropy: f64,
    /// `log p₀(x̄^O)`
    pub observed_prior: f64,
    /// `−log|det J^{OO}(x̄^O, x^H)|`
    pub lad: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.prior + self.entropy + self.observed_prior + self.lad
    }
}

/// Solves the constraint for one draw and evaluates the integrand there.
pub fn sample_terms(
    flow: &Flow,
    posterior: &VariationalPosterior,
    draw: &PosteriorDraw,
    y_o: &Vector,
    pair: &PartitionPair,
    solvers: &SolverSettings,
) -> Result<(ElboTerms, SolveResult)> {
    let sol = solvers.solve(flow, y_o, &draw.x, pair)?;
    let x = pair.latent.join(&sol.x_o, &draw.x)?;
    let lin = flow.linearize(&x)?;
    let j_oo = lin.sub_jacobian(pair.data.observed(), pair.latent.observed());
    let lad = -dense_logabsdet(&j_oo).map_err(|e| Error::SingularSubJacobian(e.to_string()))?;
    let terms = ElboTerms {
        prior: log_std_normal(&draw.x),
        entropy: -posterior.log_density_of_noise(&draw.eps),
        observed_prior: log_std_normal(&sol.x_o),
        lad,
    };
    Ok((terms, sol))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_err: f64,
    pub n_samples: usize,
    pub n_skipped: usize,
    pub prior_term: f64,
    pub entropy_term: f64,
    pub observed_prior_term: f64,
    pub lad_term: f64,
}

pub(crate) fn check_failures(failed: usize, total: usize) -> Result<()> {
    if total > 0 && failed as f64 > MAX_FAILURE_RATE * total as f64 {
        Err(Error::TooManySolverFailures { failed, total })
    } else {
        Ok(())
    }
}

/// Monte Carlo ELBO; failed solves are skipped and counted.
pub fn elbo_estimate(
    flow: &Flow,
    posterior: &VariationalPosterior,
    y_o: &Vector,
    pair: &PartitionPair,
    n_samples: usize,
    rng_seed: u64,
    solvers: &SolverSettings,
) -> Result<ElboEstimate> {
    check_dim(pair.latent.d_hidden(), posterior.dim(), "posterior dimension")?;
    let draws = posterior_sample(posterior, n_samples, rng_seed)?;
    let mut kept: Vec<ElboTerms> = Vec::with_capacity(n_samples);
    for d in &draws {
        if let Ok((t, _)) = sample_terms(flow, posterior, d, y_o, pair, solvers) {
            kept.push(t);
        }
    }
    let skipped = n_samples - kept.len();
    check_failures(skipped, n_samples)?;
    let mean = |f: fn(&ElboTerms) -> f64| summarize(&kept.iter().map(f).collect::<Vec<_>>()).mean;
    let totals: Vec<f64> = kept.iter().map(ElboTerms::total).collect();
    let (prior_term, entropy_term, observed_prior_term, lad_term) =
        (mean(|t| t.prior), mean(|t| t.entropy), mean(|t| t.observed_prior), mean(|t| t.lad));
    Ok(ElboEstimate {
        value: prior_term + entropy_term + observed_prior_term + lad_term,
        std_err: summarize(&totals).std_err,
        n_samples: kept.len(),
        n_skipped: skipped,
        prior_term,
        entropy_term,
        observed_prior_term,
        lad_term,
    })
}

/// `∇_{x^H} x̄^O = −(J^{OO})⁻¹ J^{OH}` as an operator.
pub struct ImplicitGradient<'f> {
    pj: PartitionedJacobian<'f>,
    solver: BlockSolverConfig,
}

impl<'f> ImplicitGradient<'f> {
    pub fn partitioned(&self) -> &PartitionedJacobian<'f> {
        &self.pj
    }
}

impl LinearOperator for ImplicitGradient<'_> {
    fn rows(&self) -> usize {
        self.pj.pair().latent.d_observed()
    }
    fn cols(&self) -> usize {
        self.pj.pair().latent.d_hidden()
    }
    fn apply(&self, v: &Vector) -> Result<Vector> {
        let r = self.pj.j_oh().apply(v)?;
        Ok(-self.pj.solve_oo(&r, self.solver.strategy, &self.solver.gmres)?.x)
    }
    fn apply_adjoint(&self, w: &Vector) -> Result<Vector> {
        let u = self.pj.solve_oo_adjoint(w, self.solver.strategy, &self.solver.gmres)?.x;
        Ok(-self.pj.j_oh().apply_adjoint(&u)?)
    }
}

pub fn implicit_grad_xo<'f>(
    flow: &'f Flow,
    x_o: &Vector,
    x_h: &Vector,
    pair: &PartitionPair,
    solver: &BlockSolverConfig,
) -> Result<ImplicitGradient<'f>> {
    let x = pair.latent.join(x_o, x_h)?;
    Ok(ImplicitGradient {
        pj: PartitionedJacobian::new(flow, &x, pair)?,
        solver: *solver,
    })
}

/// How the entropy term enters the pathwise gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientForm {
    /// Drops the zero-mean score term of `log q` ("sticking the landing").
    #[default]
    Stl,
    /// Exact derivative of the fixed-noise integrand.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientConfig {
    pub estimator: LadEstimator,
    /// Hutchinson probes per draw.
    pub n_probes: usize,
    pub form: GradientForm,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            estimator: LadEstimator::Nlade,
            n_probes: 1,
            form: GradientForm::Stl,
        }
    }
}

/// One draw's contribution to the ELBO gradient.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub terms: ElboTerms,
    pub solve: SolveResult,
    /// `∂ELBO/∂x^H` along the constraint manifold.
    pub grad_x_h: Vector,
    /// Ascent direction for the posterior parameters.
    pub posterior_grad: Vec<f64>,
    /// Ascent direction for the flow parameters, when requested.
    pub flow_grad: Option<FlowGrads>,
    pub lad_stats: LadStats,
}

/// Pathwise gradient of the integrand at one draw.
///
/// With `K = ∇_{x^H} x̄^O` and `γ = ∇ₓ log|det J^{OO}|` the integrand's
/// total derivative is `−x^H − γ_H + Kᵀ(−x̄^O − γ_O)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_gradient<R: Rng + ?Sized>(
    flow: &Flow,
    posterior: &VariationalPosterior,
    draw: &PosteriorDraw,
    y_o: &Vector,
    pair: &PartitionPair,
    solvers: &SolverSettings,
    cfg: &GradientConfig,
    rng: &mut R,
    want_flow: bool,
) -> Result<SampleGradient> {
    let sol = solvers.solve(flow, y_o, &draw.x, pair)?;
    let x = pair.latent.join(&sol.x_o, &draw.x)?;
    let pj = PartitionedJacobian::new(flow, &x, pair)?;
    let lin = pj.linearization();
    let j_oo = lin.sub_jacobian(pair.data.observed(), pair.latent.observed());
    let lad = -dense_logabsdet(&j_oo).map_err(|e| Error::SingularSubJacobian(e.to_string()))?;
    let terms = ElboTerms {
        prior: log_std_normal(&draw.x),
        entropy: -posterior.log_density_of_noise(&draw.eps),
        observed_prior: log_std_normal(&sol.x_o),
        lad,
    };

    let block = solvers.block_solver();
    let (gamma, lad_params, lad_stats) = lad_gradient_at(&pj, cfg.estimator, cfg.n_probes, &block, rng, want_flow)?;
    let gamma_o = pair.latent.gather_observed(&gamma);
    let gamma_h = pair.latent.gather_hidden(&gamma);

    // w = ∂F/∂x̄^O, u = (J^{OO})⁻ᵀ w, Kᵀw = −(J^{OH})ᵀ u.
    let w = -&sol.x_o - gamma_o;
    let u = pj.solve_oo_adjoint(&w, block.strategy, &block.gmres)?.x;
    let k_t_w = -pj.j_oh().apply_adjoint(&u)?;
    let mut grad_x_h = -&draw.x - gamma_h + k_t_w;

    let mut upstream = grad_x_h.clone();
    if cfg.form == GradientForm::Stl {
        upstream -= posterior.score_of_noise(&draw.eps)?;
    }
    let mut posterior_grad = posterior.pathwise_grad(&draw.eps, &upstream)?;
    if cfg.form == GradientForm::Total {
        let d = posterior.dim();
        for g in &mut posterior_grad[d..2 * d] {
            *g += 1.0;
        }
        upstream = grad_x_h.clone();
    }
    grad_x_h = upstream;

    // F depends on the flow through x̄^O (output adjoint −scatter(u)) and −LAD.
    let flow_grad = if want_flow {
        let adjoint = -scatter(&u, pair.data.observed(), flow.dim());
        let (_, Some(mut g)) = lin.reverse_sweep(Some(&adjoint), &lin.empty_seeds(), true) else {
            unreachable!("parameters requested")
        };
        if let Some(lp) = lad_params {
            g.axpy(-1.0, &lp);
        }
        Some(g)
    } else {
        None
    };

    Ok(SampleGradient {
        terms,
        solve: sol,
        grad_x_h,
        posterior_grad,
        flow_grad,
        lad_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowShape;
    use crate::linalg::{finite_diff_jacobian, GmresConfig, Matrix};
    use crate::partition::make_partition;
    use crate::rng;

    fn flow(seed: u64, dim: usize) -> Flow {
        let mut shape = FlowShape::new(dim);
        shape.layers = 3;
        shape.hidden = 8;
        shape.init_scale = 2.0;
        Flow::random(&shape, &mut rng::seeded(seed))
    }

    fn tight() -> SolverSettings {
        SolverSettings {
            fixed_point: FixedPointConfig {
                tol: 1e-10,
                decay: 1.0,
                max_iter: 300,
                ..Default::default()
            },
            newton_krylov: NewtonKrylovConfig {
                tol: 1e-10,
                gmres: GmresConfig { tol: 1e-12, ..Default::default() },
                ..Default::default()
            },
        }
    }

    #[test]
    fn joint_logpdf_matches_change_of_variables() {
        let f = flow(1, 4);
        let pair = PartitionPair::new(make_partition(&[1, 2], 4).unwrap(), make_partition(&[0, 2], 4).unwrap()).unwrap();
        let x = rng::standard_normal(&mut rng::seeded(2), 4);
        let j = partitioned_joint_logpdf(&f, &pair.latent.gather_observed(&x), &pair.latent.gather_hidden(&x), &pair)
            .unwrap();
        let direct = f.log_density_latent(&x).unwrap();
        assert!((j.total - direct).abs() < 1e-9);
    }

    #[test]
    fn identity_flow_joint_has_no_lad() {
        let f = Flow::identity(3, 2, 2);
        let pair = PartitionPair::aligned(make_partition(&[0], 3).unwrap());
        let xo = Vector::from_vec(vec![0.3]);
        let xh = Vector::from_vec(vec![-1.0, 2.0]);
        let j = partitioned_joint_logpdf(&f, &xo, &xh, &pair).unwrap();
        assert_eq!(j.lad_term, 0.0);
        assert_eq!(j.g_hh_term, 0.0);
        assert!((j.total - log_std_normal(&xo) - log_std_normal(&xh)).abs() < 1e-15);
    }

    #[test]
    fn implicit_gradient_of_linear_flow() {
        let mut g = rng::seeded(3);
        let w1 = Matrix::from_column_slice(4, 4, rng::standard_normal(&mut g, 16).as_slice()) * 0.25;
        let w2 = Matrix::from_column_slice(4, 4, rng::standard_normal(&mut g, 16).as_slice()) * 0.25;
        let f = Flow::linear_from_layers(4, vec![(w1, w2)]).unwrap();
        let pair = PartitionPair::aligned(make_partition(&[0, 3], 4).unwrap());
        let xo = Vector::from_vec(vec![0.2, 0.1]);
        let xh = Vector::from_vec(vec![-0.4, 0.9]);
        let op = implicit_grad_xo(&f, &xo, &xh, &pair, &BlockSolverConfig::default()).unwrap();
        let d = op.partitioned().dense().unwrap();
        let oracle = -d.j_oo.clone().lu().solve(&d.j_oh).unwrap();
        assert!((op.to_dense().unwrap() - oracle).amax() < 1e-8);
    }

    #[test]
    fn implicit_gradient_matches_resolve() {
        let f = flow(4, 4);
        let pair = PartitionPair::aligned(make_partition(&[1, 3], 4).unwrap());
        let x = rng::standard_normal(&mut rng::seeded(5), 4);
        let y_o = pair.data.gather_observed(&f.forward(&x).unwrap());
        let x_h = pair.latent.gather_hidden(&x);
        let s = tight();
        let sol = s.solve(&f, &y_o, &x_h, &pair).unwrap();
        let op = implicit_grad_xo(&f, &sol.x_o, &x_h, &pair, &s.block_solver()).unwrap();
        let fd = finite_diff_jacobian(|h| s.solve(&f, &y_o, h, &pair).unwrap().x_o, &x_h, 1e-5);
        assert!((op.to_dense().unwrap() - fd).amax() < 1e-4);
    }

    #[test]
    fn identity_flow_standard_posterior_has_zero_gap() {
        let f = Flow::identity(3, 2, 2);
        let pair = PartitionPair::aligned(make_partition(&[1], 3).unwrap());
        let q = VariationalPosterior::standard(2, 3, &mut rng::seeded(1));
        let y_o = Vector::from_vec(vec![0.8]);
        let e = elbo_estimate(&f, &q, &y_o, &pair, 50, 2, &SolverSettings::default()).unwrap();
        assert!((e.value - log_std_normal(&y_o)).abs() < 1e-12);
        assert!(e.lad_term == 0.0);
        let total = e.prior_term + e.entropy_term + e.observed_prior_term + e.lad_term;
        assert!((e.value - total).abs() < 1e-12);
        let mut g = rng::seeded(3);
        for d in posterior_sample(&q, 5, 4).unwrap() {
            let cfg = GradientConfig::default();
            let sg = sample_gradient(&f, &q, &d, &y_o, &pair, &SolverSettings::default(), &cfg, &mut g, false).unwrap();
            assert!(sg.posterior_grad.iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn entropy_cancellation_against_data_space_density() {
        // ELBO integrand equals log p(y) − log q_y(y^H) computed in data space.
        let f = flow(6, 2);
        let pair = PartitionPair::aligned(make_partition(&[0], 2).unwrap());
        let mut q = VariationalPosterior::standard(1, 0, &mut rng::seeded(0));
        q.mu[0] = 0.3;
        q.log_sigma[0] = -0.4;
        let y_o = Vector::from_vec(vec![0.5]);
        let s = tight();
        for d in posterior_sample(&q, 5, 7).unwrap() {
            let (t, sol) = sample_terms(&f, &q, &d, &y_o, &pair, &s).unwrap();
            let y = pair.data.join(&y_o, &sol.y_h).unwrap();
            let log_p = f.log_density(&y).unwrap();
            // dy^H/dx^H by re-solving at shifted x^H.
            let h = 1e-6;
            let shift = |dx: f64| {
                let xh = &d.x + Vector::from_element(1, dx);
                s.solve(&f, &y_o, &xh, &pair).unwrap().y_h[0]
            };
            let dydx = (shift(h) - shift(-h)) / (2.0 * h);
            let log_q_y = q.log_density(&d.x).unwrap() - dydx.abs().ln();
            assert!((t.total() - (log_p - log_q_y)).abs() < 1e-7);
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let f = flow(8, 4);
        let pair = PartitionPair::aligned(make_partition(&[0, 2], 4).unwrap());
        let mut q = VariationalPosterior::standard(2, 2, &mut rng::seeded(9));
        q.mu = Vector::from_vec(vec![0.2, -0.3]);
        q.log_sigma = Vector::from_vec(vec![-0.5, -0.2]);
        let y_o = pair.data.gather_observed(&f.forward(&rng::standard_normal(&mut rng::seeded(10), 4)).unwrap());
        let s = tight();
        let eps: Vec<Vector> = (0..4).map(|i| rng::standard_normal(&mut rng::seeded(20 + i), 2)).collect();
        let objective = |p: &VariationalPosterior| {
            eps.iter()
                .map(|e| {
                    let d = PosteriorDraw {
                        eps: e.clone(),
                        x: p.transform(e).unwrap(),
                    };
                    sample_terms(&f, p, &d, &y_o, &pair, &s).unwrap().0.total()
                })
                .sum::<f64>()
                / eps.len() as f64
        };
        let cfg = GradientConfig {
            estimator: LadEstimator::Exact,
            n_probes: 1,
            form: GradientForm::Total,
        };
        let mut grad = vec![0.0; q.num_params()];
        for e in &eps {
            let d = PosteriorDraw {
                eps: e.clone(),
                x: q.transform(e).unwrap(),
            };
            let sg = sample_gradient(&f, &q, &d, &y_o, &pair, &s, &cfg, &mut rng::seeded(0), false).unwrap();
            for (g, v) in grad.iter_mut().zip(&sg.posterior_grad) {
                *g += v / eps.len() as f64;
            }
        }
        let theta = Vector::from_vec(q.params_flat());
        let fd = finite_diff_jacobian(
            |t| {
                let mut p = q.clone();
                p.set_params_flat(t.as_slice()).unwrap();
                Vector::from_element(1, objective(&p))
            },
            &theta,
            1e-5,
        );
        let scale = fd.amax().max(1e-3);
        for (i, g) in grad.iter().enumerate() {
            assert!((g - fd[(0, i)]).abs() < 1e-3 * scale, "param {i}: {g} vs {}", fd[(0, i)]);
        }
    }

    #[test]
    fn flow_gradient_matches_finite_differences() {
        let f = flow(11, 3);
        let pair = PartitionPair::aligned(make_partition(&[1], 3).unwrap());
        let q = VariationalPosterior::standard(2, 1, &mut rng::seeded(12));
        let y_o = Vector::from_vec(vec![0.4]);
        let s = tight();
        let draw = posterior_sample(&q, 1, 13).unwrap().remove(0);
        let cfg = GradientConfig {
            estimator: LadEstimator::Exact,
            n_probes: 1,
            form: GradientForm::Total,
        };
        let sg = sample_gradient(&f, &q, &draw, &y_o, &pair, &s, &cfg, &mut rng::seeded(0), true).unwrap();
        let grad = sg.flow_grad.unwrap().flatten();
        let theta = Vector::from_vec(f.params_flat());
        let fd = finite_diff_jacobian(
            |t| {
                let mut g = f.clone();
                g.set_params_flat(t.as_slice()).unwrap();
                Vector::from_element(1, sample_terms(&g, &q, &draw, &y_o, &pair, &s).unwrap().0.total())
            },
            &theta,
            1e-5,
        );
        let scale = fd.amax().max(1e-3);
        for (i, g) in grad.iter().enumerate() {
            assert!((g - fd[(0, i)]).abs() < 1e-4 * scale, "param {i}: {g} vs {}", fd[(0, i)]);
        }
    }
}
