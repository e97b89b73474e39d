//! Solvers for the constraint `f^O(x^O; x^H) = y^O`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flows::Flow;
use crate::linalg::{inf_norm, GmresConfig, Matrix, Vector};
use crate::partition::{gather, InverseStrategy, PartitionPair, PartitionedJacobian};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointConfig {
    pub alpha0: f64,
    pub beta0: f64,
    /// Both mixing coefficients are multiplied by this after every iteration.
    pub decay: f64,
    /// Threshold on `‖f^O(x^O; x^H) − y^O‖∞`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.5,
            beta0: 0.5,
            decay: 0.95,
            tol: 1e-3,
            max_iter: 100,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.alpha0) || !unit(self.beta0) || !unit(self.decay) {
            return Err(Error::InvalidParams("alpha0, beta0 and decay must lie in (0, 1]".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParams("fixed point needs tol > 0 and max_iter >= 1".into()));
        }
        Ok(())
    }

    /// Mixing coefficients in effect after `k` completed iterations.
    pub fn schedule(&self, k: usize) -> (f64, f64) {
        let f = self.decay.powi(k as i32);
        (self.alpha0 * f, self.beta0 * f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonKrylovConfig {
    pub step_size: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Step halvings allowed before a Newton iteration is declared failed.
    pub max_backtracks: usize,
    pub gmres: GmresConfig,
    pub inverse_strategy: InverseStrategy,
}

impl Default for NewtonKrylovConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            tol: 1e-3,
            max_iter: 50,
            max_backtracks: 30,
            gmres: GmresConfig::default(),
            inverse_strategy: InverseStrategy::default(),
        }
    }
}

impl NewtonKrylovConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::InvalidParams("step_size must lie in (0, 1]".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParams("newton-krylov needs tol > 0 and max_iter >= 1".into()));
        }
        self.gmres.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    FixedPoint,
    NewtonKrylov,
    Hybrid,
}

impl SolveMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveMethod::FixedPoint => "fixed_point",
            SolveMethod::NewtonKrylov => "newton_krylov",
            SolveMethod::Hybrid => "hybrid",
        }
    }
}

/// One solver iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// `‖f^O − y^O‖∞` at the current iterate.
    pub residual: f64,
    /// `‖x^O_k − x^O_{k−1}‖₂`.
    pub step: f64,
    pub alpha: f64,
    pub beta: f64,
    pub method: SolveMethod,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x_o: Vector,
    pub y_h: Vector,
    /// `‖f^O(x^O; x^H) − y^O‖∞` at the returned point.
    pub residual: f64,
    pub iterations: usize,
    pub method: SolveMethod,
    pub trace: Vec<TraceRow>,
}

/// The flow seen as a function of the two latent blocks.
pub struct Constraint<'a> {
    pub flow: &'a Flow,
    pub y_o: &'a Vector,
    pub x_h: &'a Vector,
    pub pair: &'a PartitionPair,
}

impl<'a> Constraint<'a> {
    pub fn new(flow: &'a Flow, y_o: &'a Vector, x_h: &'a Vector, pair: &'a PartitionPair) -> Result<Self> {
        check_dim(flow.dim(), pair.dim(), "partition dimension")?;
        check_dim(pair.data.d_observed(), y_o.len(), "observed values")?;
        check_dim(pair.latent.d_hidden(), x_h.len(), "hidden latent values")?;
        Ok(Self { flow, y_o, x_h, pair })
    }

    pub fn latent(&self, x_o: &Vector) -> Result<Vector> {
        self.pair.latent.join(x_o, self.x_h)
    }

    /// `f(x)` at `x = (x^O, x^H)` and the constraint residual there.
    pub fn evaluate(&self, x_o: &Vector) -> Result<(Vector, f64)> {
        let y = self.flow.forward(&self.latent(x_o)?)?;
        let res = inf_norm(&(gather(&y, self.pair.data.observed()) - self.y_o));
        Ok((y, res))
    }

    /// `f^H(x^O, x^H)`.
    pub fn f_h(&self, x_o: &Vector) -> Result<Vector> {
        Ok(gather(&self.evaluate(x_o)?.0, self.pair.data.hidden()))
    }

    /// `g^O(y^O, y^H)`.
    pub fn g_o(&self, y_h: &Vector) -> Result<Vector> {
        let y = self.pair.data.join(self.y_o, y_h)?;
        Ok(gather(&self.flow.inverse(&y)?, self.pair.latent.observed()))
    }

    /// `‖g^O(y^O, y^H) − x^O‖∞` with `y^H` read off `y = f(x^O, x^H)`.
    pub fn inverse_gap(&self, x_o: &Vector, y: &Vector) -> Result<f64> {
        Ok(inf_norm(&(self.g_o(&gather(y, self.pair.data.hidden()))? - x_o)))
    }

    /// Both output forms within `tol`; the inverse is only run once the forward form passes.
    fn solved(&self, x_o: &Vector, y: &Vector, residual: f64, tol: f64) -> bool {
        residual < tol && self.inverse_gap(x_o, y).is_ok_and(|g| g < tol)
    }
}

struct FixedPointRun {
    result: SolveResult,
    converged: bool,
}

fn run_fixed_point(c: &Constraint<'_>, cfg: &FixedPointConfig) -> Result<FixedPointRun> {
    cfg.validate()?;
    let d_o = c.pair.latent.d_observed();
    let chi = Vector::zeros(d_o);
    let mut y_h_mix = c.f_h(&chi)?;
    let mut x_mix = c.g_o(&y_h_mix)?;
    let mut evaluations = 1;
    let mut trace = Vec::new();
    let mut step = (&x_mix - &chi).norm();
    for k in 0..cfg.max_iter {
        let (alpha, beta) = cfg.schedule(k);
        let (y, residual) = c.evaluate(&x_mix)?;
        trace.push(TraceRow {
            iteration: evaluations,
            residual,
            step,
            alpha,
            beta,
            method: SolveMethod::FixedPoint,
        });
        let y_h = gather(&y, c.pair.data.hidden());
        if c.solved(&x_mix, &y, residual, cfg.tol) {
            return Ok(FixedPointRun {
                result: SolveResult {
                    x_o: x_mix,
                    y_h,
                    residual,
                    iterations: evaluations,
                    method: SolveMethod::FixedPoint,
                    trace,
                },
                converged: true,
            });
        }
        if k + 1 == cfg.max_iter {
            return Ok(FixedPointRun {
                result: SolveResult {
                    x_o: x_mix,
                    y_h,
                    residual,
                    iterations: evaluations,
                    method: SolveMethod::FixedPoint,
                    trace,
                },
                converged: false,
            });
        }
        y_h_mix = &y_h * alpha + &y_h_mix * (1.0 - alpha);
        let x_o = c.g_o(&y_h_mix)?;
        evaluations += 1;
        let next = &x_o * beta + &x_mix * (1.0 - beta);
        step = (&next - &x_mix).norm();
        x_mix = next;
    }
    unreachable!("loop returns on its last iteration")
}

/// Damped alternation between `f^H` and `g^O` starting from `χ^O = 0`.
///
/// `iterations` counts evaluations of `g^O`.
pub fn fixed_point_solve(
    flow: &Flow,
    y_o: &Vector,
    x_h: &Vector,
    pair: &PartitionPair,
    cfg: &FixedPointConfig,
) -> Result<SolveResult> {
    let c = Constraint::new(flow, y_o, x_h, pair)?;
    let run = run_fixed_point(&c, cfg)?;
    if run.converged {
        Ok(run.result)
    } else {
        Err(Error::NoConvergence {
            residual: run.result.residual,
            iterations: run.result.iterations,
        })
    }
}

fn run_newton(c: &Constraint<'_>, cfg: &NewtonKrylovConfig, x0: Vector, method: SolveMethod) -> Result<SolveResult> {
    cfg.validate()?;
    let mut x = x0;
    let (mut y, mut residual) = c.evaluate(&x)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        residual,
        step: 0.0,
        alpha: f64::NAN,
        beta: f64::NAN,
        method,
    }];
    let mut iterations = 0;
    while !c.solved(&x, &y, residual, cfg.tol) {
        if iterations == cfg.max_iter {
            return Err(Error::NoConvergence { residual, iterations });
        }
        iterations += 1;
        let pj = PartitionedJacobian::new(c.flow, &c.latent(&x)?, c.pair)?;
        let r = gather(&y, c.pair.data.observed()) - c.y_o;
        let dir = pj.solve_oo(&r, cfg.inverse_strategy, &cfg.gmres)?.x;
        let mut t = cfg.step_size;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let cand = &x - &dir * t;
            if let Ok((cy, cres)) = c.evaluate(&cand) {
                if cres < residual {
                    accepted = Some((cand, cy, cres));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, cy, cres)) = accepted else {
            return Err(Error::NoConvergence { residual, iterations });
        };
        trace.push(TraceRow {
            iteration: iterations,
            residual: cres,
            step: (&cand - &x).norm(),
            alpha: f64::NAN,
            beta: f64::NAN,
            method,
        });
        x = cand;
        y = cy;
        residual = cres;
    }
    Ok(SolveResult {
        y_h: gather(&y, c.pair.data.hidden()),
        x_o: x,
        residual,
        iterations,
        method,
        trace,
    })
}

/// Newton iteration `x^O ← x^O − s (J^{OO})⁻¹ (f^O − y^O)` with halving backtracking.
pub fn newton_krylov_solve(
    flow: &Flow,
    y_o: &Vector,
    x_h: &Vector,
    pair: &PartitionPair,
    cfg: &NewtonKrylovConfig,
    x0: Option<&Vector>,
) -> Result<SolveResult> {
    let c = Constraint::new(flow, y_o, x_h, pair)?;
    let start = match x0 {
        Some(v) => {
            check_dim(pair.latent.d_observed(), v.len(), "newton initial guess")?;
            v.clone()
        }
        None => Vector::zeros(pair.latent.d_observed()),
    };
    run_newton(&c, cfg, start, SolveMethod::NewtonKrylov)
}

/// Fixed point first; Newton–Krylov warm-started from its last iterate if it stalls.
pub fn solve_constraint(
    flow: &Flow,
    y_o: &Vector,
    x_h: &Vector,
    pair: &PartitionPair,
    fp: &FixedPointConfig,
    nk: &NewtonKrylovConfig,
) -> Result<SolveResult> {
    let c = Constraint::new(flow, y_o, x_h, pair)?;
    let (start, mut trace, fp_iters) = match run_fixed_point(&c, fp) {
        Ok(run) if run.converged => return Ok(run.result),
        Ok(run) => (run.result.x_o, run.result.trace, run.result.iterations),
        // An inverse that fails mid-way leaves no usable iterate.
        Err(_) => (Vector::zeros(pair.latent.d_observed()), Vec::new(), 0),
    };
    let mut out = run_newton(&c, nk, start, SolveMethod::Hybrid)?;
    trace.append(&mut out.trace);
    out.trace = trace;
    out.iterations += fp_iters;
    Ok(out)
}

/// Writes solver trace rows as CSV with a header.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "residual", "step", "alpha", "beta", "method"])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.residual.to_string(),
            r.step.to_string(),
            r.alpha.to_string(),
            r.beta.to_string(),
            r.method.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The comparison matrix bounding one damped iteration and its spectral radius.
pub fn theorem1_contraction_matrix(l_a: f64, l_b: f64, alpha: f64, beta: f64) -> (Matrix, f64) {
    let c = Matrix::from_row_slice(
        2,
        2,
        &[
            1.0 - alpha,
            alpha * l_a,
            (1.0 - alpha) * beta * l_b,
            1.0 - beta + alpha * beta * l_a * l_b,
        ],
    );
    let tr = c[(0, 0)] + c[(1, 1)];
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    let disc = tr * tr - 4.0 * det;
    let rho = if disc >= 0.0 {
        let s = disc.sqrt();
        ((tr + s) / 2.0).abs().max(((tr - s) / 2.0).abs())
    } else {
        det.abs().sqrt()
    };
    (c, rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    /// Largest observed ratio for `f^H` varying `x^O`.
    pub l_a: f64,
    /// Largest observed ratio for `g^O` varying `y^H`.
    pub l_b: f64,
    pub product: f64,
}

const SECANT_STEP: f64 = 1e-4;

/// Dominant right singular direction of a dense block, or `None` if it vanishes.
fn top_direction(m: &Matrix) -> Option<Vector> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t?;
    let (k, s) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    (s > 0.0).then(|| v_t.row(k).transpose())
}

/// Empirical lower bound on `L_a·L_b` from difference quotients.
///
/// Each probe draws a latent point from the base distribution and measures
/// secant ratios along the locally steepest direction and along a random
/// direction with a unit-scale separation; the maxima over probes are reported.
pub fn estimate_lipschitz_product(
    flow: &Flow,
    pair: &PartitionPair,
    n_probes: usize,
    rng_seed: u64,
) -> Result<LipschitzEstimate> {
    check_dim(flow.dim(), pair.dim(), "partition dimension")?;
    let mut g = rng::seeded(rng_seed);
    let o_x = pair.latent.observed();
    let h_y = pair.data.hidden();
    let mut l_a: f64 = 0.0;
    let mut l_b: f64 = 0.0;
    for _ in 0..n_probes.max(1) {
        let x = rng::standard_normal(&mut g, flow.dim());
        let y = flow.forward(&x)?;
        let pj = PartitionedJacobian::new(flow, &x, pair)?;
        let dense = pj.dense()?;

        let f_h = |xo: &Vector| -> Result<Vector> {
            let mut full = x.clone();
            for (k, &i) in o_x.iter().enumerate() {
                full[i] = xo[k];
            }
            Ok(gather(&flow.forward(&full)?, h_y))
        };
        let g_o = |yh: &Vector| -> Result<Vector> {
            let mut full = y.clone();
            for (k, &i) in h_y.iter().enumerate() {
                full[i] = yh[k];
            }
            Ok(gather(&flow.inverse(&full)?, o_x))
        };
        let x_o = gather(&x, o_x);
        let y_h = gather(&y, h_y);
        let random_o = {
            let v = rng::standard_normal(&mut g, o_x.len());
            &v / v.norm().max(f64::MIN_POSITIVE)
        };
        let random_h = {
            let v = rng::standard_normal(&mut g, h_y.len());
            &v / v.norm().max(f64::MIN_POSITIVE)
        };
        let wide: f64 = g.random_range(0.1..1.0);

        let mut dirs_a = vec![(random_o, wide)];
        if let Some(v) = top_direction(&dense.j_ho) {
            dirs_a.push((v, SECANT_STEP));
        }
        for (v, h) in dirs_a {
            let (p, m) = (&x_o + &v * h, &x_o - &v * h);
            let ratio = (f_h(&p)? - f_h(&m)?).norm() / (2.0 * h);
            l_a = l_a.max(ratio);
        }
        let mut dirs_b = vec![(random_h, wide)];
        if let Some(v) = top_direction(&dense.g_oh) {
            dirs_b.push((v, SECANT_STEP));
        }
        for (v, h) in dirs_b {
            let (p, m) = (&y_h + &v * h, &y_h - &v * h);
            let ratio = (g_o(&p)? - g_o(&m)?).norm() / (2.0 * h);
            l_b = l_b.max(ratio);
        }
    }
    Ok(LipschitzEstimate {
        l_a,
        l_b,
        product: l_a * l_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowShape;
    use crate::partition::make_partition;

    fn flow(seed: u64, dim: usize, lip: f64) -> Flow {
        let mut shape = FlowShape::new(dim);
        shape.layers = 4;
        shape.hidden = 16;
        shape.lipschitz = lip;
        shape.init_scale = 2.0;
        Flow::random(&shape, &mut rng::seeded(seed))
    }

    fn problem(f: &Flow, seed: u64, observed: &[usize]) -> (PartitionPair, Vector, Vector, Vector) {
        let pair = PartitionPair::aligned(make_partition(observed, f.dim()).unwrap());
        let x = rng::standard_normal(&mut rng::seeded(seed), f.dim());
        let y = f.forward(&x).unwrap();
        let y_o = pair.data.gather_observed(&y);
        let x_h = pair.latent.gather_hidden(&x);
        let x_o = pair.latent.gather_observed(&x);
        (pair, y_o, x_h, x_o)
    }

    #[test]
    fn identity_flow_solves_in_one_iteration() {
        let f = Flow::identity(4, 2, 3);
        let (pair, y_o, x_h, _) = problem(&f, 1, &[0, 2]);
        let r = fixed_point_solve(&f, &y_o, &x_h, &pair, &FixedPointConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.x_o, y_o);
        let nk = newton_krylov_solve(&f, &y_o, &x_h, &pair, &NewtonKrylovConfig::default(), None).unwrap();
        assert!((nk.x_o - &y_o).amax() < 1e-12);
        assert_eq!(nk.iterations, 1);
        let h = solve_constraint(&f, &y_o, &x_h, &pair, &FixedPointConfig::default(), &NewtonKrylovConfig::default())
            .unwrap();
        assert_eq!(h.method, SolveMethod::FixedPoint);
    }

    #[test]
    fn schedule_is_geometric() {
        let cfg = FixedPointConfig::default();
        for k in 0..20 {
            let (a, b) = cfg.schedule(k);
            assert_eq!(a, 0.5 * 0.95f64.powi(k as i32));
            assert_eq!(b, a);
        }
    }

    #[test]
    fn solution_satisfies_both_residual_forms() {
        let f = flow(2, 6, 0.6);
        let (pair, y_o, x_h, _) = problem(&f, 3, &[0, 1, 4]);
        let cfg = FixedPointConfig::default();
        let r = fixed_point_solve(&f, &y_o, &x_h, &pair, &cfg).unwrap();
        let c = Constraint::new(&f, &y_o, &x_h, &pair).unwrap();
        assert!(inf_norm(&(c.f_h(&r.x_o).unwrap() - &r.y_h)) <= cfg.tol);
        assert!(inf_norm(&(c.g_o(&r.y_h).unwrap() - &r.x_o)) <= cfg.tol);
        assert!((c.evaluate(&r.x_o).unwrap().1 - r.residual).abs() <= 1e-12);
    }

    #[test]
    fn fixed_point_and_newton_agree() {
        let f = flow(4, 8, 0.5);
        let (pair, y_o, x_h, x_o) = problem(&f, 5, &[1, 2, 5, 6, 7]);
        let fp = FixedPointConfig {
            alpha0: 1.0,
            beta0: 1.0,
            decay: 1.0,
            tol: 1e-10,
            max_iter: 500,
        };
        let a = fixed_point_solve(&f, &y_o, &x_h, &pair, &fp).unwrap();
        let nk = NewtonKrylovConfig {
            tol: 1e-10,
            gmres: GmresConfig { tol: 1e-12, ..Default::default() },
            ..Default::default()
        };
        let b = newton_krylov_solve(&f, &y_o, &x_h, &pair, &nk, None).unwrap();
        assert!((&a.x_o - &b.x_o).amax() < 1e-5);
        assert!((&b.x_o - &x_o).amax() < 1e-6);
    }

    #[test]
    fn strategies_and_dense_newton_agree() {
        let f = flow(6, 8, 0.9);
        let (pair, y_o, x_h, _) = problem(&f, 7, &[0, 1, 2, 3, 4]);
        let mut sols = Vec::new();
        for s in [InverseStrategy::DirectGmres, InverseStrategy::Preconditioned, InverseStrategy::Schur] {
            let cfg = NewtonKrylovConfig {
                tol: 1e-10,
                gmres: GmresConfig { tol: 1e-12, ..Default::default() },
                inverse_strategy: s,
                ..Default::default()
            };
            sols.push(newton_krylov_solve(&f, &y_o, &x_h, &pair, &cfg, None).unwrap().x_o);
        }
        // Dense Newton with LU solves.
        let c = Constraint::new(&f, &y_o, &x_h, &pair).unwrap();
        let mut x = Vector::zeros(5);
        for _ in 0..50 {
            let (y, res) = c.evaluate(&x).unwrap();
            if res < 1e-12 {
                break;
            }
            let pj = PartitionedJacobian::new(&f, &c.latent(&x).unwrap(), &pair).unwrap();
            let j = pj.dense().unwrap().j_oo;
            let r = gather(&y, pair.data.observed()) - &y_o;
            x -= j.lu().solve(&r).unwrap();
        }
        for s in &sols {
            assert!((s - &sols[0]).amax() < 1e-6);
            assert!((s - &x).amax() < 1e-7);
        }
    }

    #[test]
    fn hybrid_after_fixed_point_budget() {
        let f = flow(8, 6, 0.95);
        let (pair, y_o, x_h, _) = problem(&f, 9, &[0, 2, 3]);
        let fp = FixedPointConfig {
            max_iter: 1,
            tol: 1e-9,
            ..Default::default()
        };
        let nk = NewtonKrylovConfig {
            tol: 1e-9,
            ..Default::default()
        };
        let r = solve_constraint(&f, &y_o, &x_h, &pair, &fp, &nk).unwrap();
        assert_eq!(r.method, SolveMethod::Hybrid);
        assert!(r.residual < 1e-9);
        let mut buf = Vec::new();
        write_trace_csv(&r.trace, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("hybrid"));
    }

    #[test]
    fn contraction_matrix_cases() {
        let (c, rho) = theorem1_contraction_matrix(0.5, 1.0, 1.0, 1.0);
        assert_eq!(c, Matrix::from_row_slice(2, 2, &[0.0, 0.5, 0.0, 0.5]));
        assert!((rho - 0.5).abs() < 1e-15);
        let (c, rho) = theorem1_contraction_matrix(0.0, 0.0, 0.3, 0.6);
        assert_eq!(c, Matrix::from_row_slice(2, 2, &[0.7, 0.0, 0.0, 0.4]));
        assert!((rho - 0.7).abs() < 1e-15);
        let (c, rho) = theorem1_contraction_matrix(0.9, 0.9, 0.5, 0.5);
        let eig = c.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!((rho - eig).abs() < 1e-12);
        assert!(rho < 1.0);
    }

    #[test]
    fn lipschitz_estimate_on_identity_is_zero() {
        let f = Flow::identity(4, 2, 2);
        let pair = PartitionPair::aligned(make_partition(&[0, 1], 4).unwrap());
        let est = estimate_lipschitz_product(&f, &pair, 5, 1).unwrap();
        assert_eq!(est.product, 0.0);
    }

    #[test]
    fn lipschitz_estimate_bounded_by_linear_oracle() {
        let mut g = rng::seeded(3);
        let w1 = Matrix::from_column_slice(4, 4, rng::standard_normal(&mut g, 16).as_slice()) * 0.2;
        let w2 = Matrix::from_column_slice(4, 4, rng::standard_normal(&mut g, 16).as_slice()) * 0.2;
        let f = Flow::linear_from_layers(4, vec![(w1, w2)]).unwrap();
        let pair = PartitionPair::aligned(make_partition(&[0, 3], 4).unwrap());
        let x = Vector::zeros(4);
        let d = PartitionedJacobian::new(&f, &x, &pair).unwrap().dense().unwrap();
        let bound = crate::linalg::spectral_norm(&d.j_ho) * crate::linalg::spectral_norm(&d.g_oh);
        let est = estimate_lipschitz_product(&f, &pair, 20, 4).unwrap();
        assert!(est.product <= bound * (1.0 + 1e-6));
        assert!(est.product >= 0.99 * bound);
    }
}
