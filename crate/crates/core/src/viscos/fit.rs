use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::elbo::{check_failures, elbo_estimate, sample_gradient, ElboEstimate, GradientConfig, SolverSettings};
use super::posterior::{posterior_sample, VariationalPosterior};
use crate::error::{check_dim, Error, Result};
use crate::flows::Flow;
use crate::linalg::Vector;
use crate::optim::{Adam, AdamConfig};
use crate::partition::{select_latent_partition, Partition, PartitionPair};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPolicy {
    /// Latent partition equal to the data partition.
    #[default]
    Aligned,
    /// Greedy swaps maximizing `log|det J^{OO}|` at the initial point.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    /// Posterior draws per step.
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub n_reflectors: usize,
    pub gradient: GradientConfig,
    pub partition_policy: PartitionPolicy,
    pub selection_budget: usize,
    pub solvers: SolverSettings,
    /// Values for unobserved slots when pulling back the initial point.
    pub fill: Option<Vec<f64>>,
    /// Draws for the final ELBO estimate.
    pub final_elbo_samples: usize,
    /// Completions drawn from the fitted posterior.
    pub final_samples: usize,
    pub max_failure_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            optimizer: AdamConfig::default(),
            n_reflectors: 50,
            gradient: GradientConfig::default(),
            partition_policy: PartitionPolicy::Aligned,
            selection_budget: 4,
            solvers: SolverSettings::default(),
            fill: None,
            final_elbo_samples: 256,
            final_samples: 16,
            max_failure_rate: 0.2,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.solvers.fixed_point.validate()?;
        self.solvers.newton_krylov.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidParams("batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.max_failure_rate) {
            return Err(Error::InvalidParams("max_failure_rate must lie in [0, 1)".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::InvalidParams("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One optimization step of the conditioning loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub elbo: f64,
    pub prior_term: f64,
    pub entropy_term: f64,
    pub lad_term: f64,
    pub observed_prior_term: f64,
    /// Mean solver iterations per draw.
    pub solver_iters: f64,
    pub solver_method: &'static str,
    /// Largest constraint residual over the batch.
    pub residual: f64,
    pub kl_to_base: f64,
    pub failed_draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Timings {
    pub setup_secs: f64,
    pub fit_secs: f64,
    pub final_elbo_secs: f64,
    pub sample_secs: f64,
}

#[derive(Debug, Clone)]
pub struct ConditioningReport {
    pub trace: Vec<StepRecord>,
    pub failed_steps: usize,
    pub posterior: VariationalPosterior,
    pub partitions: PartitionPair,
    pub observation: Vector,
    pub final_elbo: Option<ElboEstimate>,
    pub samples: Vec<Vector>,
    pub timings: Timings,
}

impl ConditioningReport {
    pub fn last(&self) -> Option<&StepRecord> {
        self.trace.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_report_csv(&self.trace, out)
    }
}

pub fn write_report_csv<W: Write>(trace: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "elbo",
        "prior_term",
        "entropy_term",
        "lad_term",
        "solver_iters",
        "solver_method",
        "residual",
        "observed_prior_term",
        "kl_to_base",
    ])?;
    for r in trace {
        w.write_record([
            r.step.to_string(),
            r.elbo.to_string(),
            r.prior_term.to_string(),
            r.entropy_term.to_string(),
            r.lad_term.to_string(),
            r.solver_iters.to_string(),
            r.solver_method.to_string(),
            r.residual.to_string(),
            r.observed_prior_term.to_string(),
            r.kl_to_base.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Initial latent point: the inverse image of the observation with the
/// unobserved slots taken from `fill` (zeros when absent).
fn pull_back(flow: &Flow, y_o: &Vector, data: &Partition, fill: Option<&[f64]>) -> Result<Vector> {
    let y_h = match fill {
        Some(f) => {
            check_dim(data.dim(), f.len(), "fill vector")?;
            Vector::from_iterator(data.d_hidden(), data.hidden().iter().map(|&i| f[i]))
        }
        None => Vector::zeros(data.d_hidden()),
    };
    flow.inverse(&data.join(y_o, &y_h)?)
}

fn majority_method(methods: &[&'static str]) -> &'static str {
    let mut best = ("none", 0);
    for &m in methods {
        let c = methods.iter().filter(|&&o| o == m).count();
        if c > best.1 {
            best = (m, c);
        }
    }
    best.0
}

/// Fits a variational posterior over `x^H` to `p(· | y^O)`.
///
/// Each step draws a batch from `q`, solves the constraint for every draw,
/// averages the pathwise ELBO gradients and takes one Adam ascent step. A
/// step fails when more than `max_failure_rate` of its draws fail; the run
/// aborts once failed steps exceed that fraction of the budget.
pub fn fit_conditional(flow: &Flow, y_o: &Vector, data: &Partition, cfg: &FitConfig) -> Result<ConditioningReport> {
    cfg.validate()?;
    check_dim(flow.dim(), data.dim(), "data partition dimension")?;
    check_dim(data.d_observed(), y_o.len(), "observation length")?;
    let t0 = Instant::now();

    let x_init = pull_back(flow, y_o, data, cfg.fill.as_deref())?;
    let latent = match cfg.partition_policy {
        PartitionPolicy::Aligned => data.clone(),
        PartitionPolicy::Greedy => select_latent_partition(flow, &x_init, data, cfg.selection_budget)?,
    };
    let pair = PartitionPair::new(latent, data.clone())?;
    let d_h = pair.latent.d_hidden();
    let mut posterior = VariationalPosterior::standard(
        d_h,
        cfg.n_reflectors,
        &mut rng::seeded(rng::derive_seed(cfg.seed, u64::MAX)),
    );
    if cfg.fill.is_some() {
        posterior.mu = pair.latent.gather_hidden(&x_init);
    }
    let mut params = posterior.params_flat();
    let mut adam = Adam::new(cfg.optimizer, params.len());
    let setup_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut failed_steps = 0;
    for step in 0..cfg.steps {
        let step_seed = rng::derive_seed(cfg.seed, step as u64);
        let draws = posterior_sample(&posterior, cfg.batch, step_seed)?;
        let mut probe_rng = rng::seeded(rng::derive_seed(step_seed, 1));
        let mut grad = vec![0.0; params.len()];
        let mut ok = 0usize;
        let (mut elbo, mut prior, mut entropy, mut lad, mut obs) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut iters, mut residual) = (0.0, 0.0f64);
        let mut methods = Vec::with_capacity(cfg.batch);
        for d in &draws {
            let Ok(sg) = sample_gradient(flow, &posterior, d, y_o, &pair, &cfg.solvers, &cfg.gradient, &mut probe_rng, false)
            else {
                continue;
            };
            ok += 1;
            for (g, v) in grad.iter_mut().zip(&sg.posterior_grad) {
                *g += v;
            }
            elbo += sg.terms.total();
            prior += sg.terms.prior;
            entropy += sg.terms.entropy;
            lad += sg.terms.lad;
            obs += sg.terms.observed_prior;
            iters += sg.solve.iterations as f64;
            residual = residual.max(sg.solve.residual);
            methods.push(sg.solve.method.as_str());
        }
        let failed = cfg.batch - ok;
        if ok == 0 || failed as f64 > cfg.max_failure_rate * cfg.batch as f64 {
            failed_steps += 1;
            if failed_steps as f64 > cfg.max_failure_rate * cfg.steps as f64 {
                return Err(Error::TooManySolverFailures {
                    failed: failed_steps,
                    total: step + 1,
                });
            }
            continue;
        }
        let n = ok as f64;
        // Adam minimizes; ascend the ELBO.
        let descent: Vec<f64> = grad.iter().map(|g| -g / n).collect();
        adam.step(&mut params, &descent);
        let record = StepRecord {
            step,
            elbo: elbo / n,
            prior_term: prior / n,
            entropy_term: entropy / n,
            lad_term: lad / n,
            observed_prior_term: obs / n,
            solver_iters: iters / n,
            solver_method: majority_method(&methods),
            residual,
            kl_to_base: 0.0,
            failed_draws: failed,
        };
        posterior.set_params_flat(&params)?;
        trace.push(StepRecord {
            kl_to_base: posterior.kl_to_standard_normal(),
            ..record
        });
    }
    let fit_secs = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let final_elbo = if cfg.final_elbo_samples > 0 {
        Some(elbo_estimate(
            flow,
            &posterior,
            y_o,
            &pair,
            cfg.final_elbo_samples,
            rng::derive_seed(cfg.seed, u64::MAX - 1),
            &cfg.solvers,
        )?)
    } else {
        None
    };
    let final_elbo_secs = t2.elapsed().as_secs_f64();

    let t3 = Instant::now();
    let samples = conditional_sample(
        flow,
        &posterior,
        y_o,
        &pair,
        cfg.final_samples,
        rng::derive_seed(cfg.seed, u64::MAX - 2),
        &cfg.solvers,
    )?
    .samples;
    let sample_secs = t3.elapsed().as_secs_f64();

    Ok(ConditioningReport {
        trace,
        failed_steps,
        posterior,
        partitions: pair,
        observation: y_o.clone(),
        final_elbo,
        samples,
        timings: Timings {
            setup_secs,
            fit_secs,
            final_elbo_secs,
            sample_secs,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSamples {
    /// Completed vectors `y` in data coordinates.
    pub samples: Vec<Vector>,
    /// Constraint residual of each kept sample.
    pub residuals: Vec<f64>,
    pub failures: usize,
}

/// Completes `y^O` with `n` draws: `y^H = f^H(x̄^O, x^H)`, observed slots copied.
pub fn conditional_sample(
    flow: &Flow,
    posterior: &VariationalPosterior,
    y_o: &Vector,
    pair: &PartitionPair,
    n: usize,
    rng_seed: u64,
    solvers: &SolverSettings,
) -> Result<ConditionalSamples> {
    check_dim(pair.latent.d_hidden(), posterior.dim(), "posterior dimension")?;
    check_dim(pair.data.d_observed(), y_o.len(), "observation length")?;
    let mut out = ConditionalSamples {
        samples: Vec::with_capacity(n),
        residuals: Vec::with_capacity(n),
        failures: 0,
    };
    for d in posterior_sample(posterior, n, rng_seed)? {
        match solvers.solve(flow, y_o, &d.x, pair) {
            Ok(sol) => {
                out.samples.push(pair.data.join(y_o, &sol.y_h)?);
                out.residuals.push(sol.residual);
            }
            Err(_) => out.failures += 1,
        }
    }
    check_failures(out.failures, n)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::make_partition;

    fn quick(steps: usize) -> FitConfig {
        FitConfig {
            steps,
            n_reflectors: 2,
            final_elbo_samples: 64,
            final_samples: 8,
            ..Default::default()
        }
    }

    #[test]
    fn identity_flow_converges_to_base() {
        let f = Flow::identity(3, 2, 2);
        let data = make_partition(&[0], 3).unwrap();
        let y_o = Vector::from_vec(vec![0.7]);
        let mut cfg = quick(500);
        cfg.fill = Some(vec![0.0, 2.0, -2.0]);
        let r = fit_conditional(&f, &y_o, &data, &cfg).unwrap();
        assert_eq!(r.trace.len(), 500);
        assert!(r.posterior.kl_to_standard_normal() < 0.01, "kl {}", r.posterior.kl_to_standard_normal());
        let e = r.final_elbo.unwrap();
        assert!((e.value - (-0.5 * (0.49 + crate::numerics::LN_2PI))).abs() < 1e-2);
        for s in &r.samples {
            assert_eq!(s[0].to_bits(), y_o[0].to_bits());
        }
    }

    #[test]
    fn observed_slots_are_copied() {
        let f = Flow::identity(4, 1, 2);
        let pair = PartitionPair::aligned(make_partition(&[1, 3], 4).unwrap());
        let q = VariationalPosterior::standard(2, 0, &mut rng::seeded(0));
        let y_o = Vector::from_vec(vec![0.1 + 0.2, -1.0 / 3.0]);
        let s = conditional_sample(&f, &q, &y_o, &pair, 10, 5, &SolverSettings::default()).unwrap();
        assert_eq!(s.samples.len(), 10);
        for y in &s.samples {
            assert_eq!(y[1].to_bits(), y_o[0].to_bits());
            assert_eq!(y[3].to_bits(), y_o[1].to_bits());
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let f = Flow::identity(2, 1, 2);
        let data = make_partition(&[1], 2).unwrap();
        let y_o = Vector::from_vec(vec![0.3]);
        let a = fit_conditional(&f, &y_o, &data, &quick(20)).unwrap();
        let b = fit_conditional(&f, &y_o, &data, &quick(20)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.posterior, b.posterior);
    }

    #[test]
    fn report_csv_has_one_row_per_step() {
        let f = Flow::identity(2, 1, 2);
        let data = make_partition(&[0], 2).unwrap();
        let r = fit_conditional(&f, &Vector::from_vec(vec![0.0]), &data, &quick(5)).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("step,elbo,prior_term,entropy_term,lad_term,solver_iters"));
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn rejects_bad_config() {
        let f = Flow::identity(2, 1, 2);
        let data = make_partition(&[0], 2).unwrap();
        let cfg = FitConfig {
            batch: 0,
            ..Default::default()
        };
        assert!(matches!(
            fit_conditional(&f, &Vector::from_vec(vec![0.0]), &data, &cfg),
            Err(Error::InvalidParams(_))
        ));
    }
}
