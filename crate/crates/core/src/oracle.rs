//! Ground truth for conditionals: grid quadrature, rejection sampling,
//! importance-sampled marginals and sample metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flows::Flow;
use crate::linalg::Vector;
use crate::partition::{Partition, PartitionPair};
use crate::rng;
use crate::viscos::elbo::{check_failures, sample_terms, SolverSettings};
use crate::viscos::posterior::{posterior_sample, VariationalPosterior};

/// Largest allowed change of `log p(y^O)` between `n` and `2n` grid points.
pub const MAX_GRID_DRIFT: f64 = 1e-4;
/// Largest conditional mass allowed in the outermost grid cells.
pub const MAX_EDGE_MASS: f64 = 1e-4;
pub const DEFAULT_GRID_POINTS: usize = 512;
pub const DEFAULT_GRID_HALF_WIDTH: f64 = 6.0;
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-6;
pub const MIN_ESS: f64 = 10.0;

/// Axis-aligned grid over the hidden data coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_points: usize,
}

impl GridSpec {
    fn validate(&self, d_h: usize) -> Result<()> {
        check_dim(d_h, self.lo.len(), "grid lower bounds")?;
        check_dim(d_h, self.hi.len(), "grid upper bounds")?;
        if self.n_points < 3 || self.lo.iter().zip(&self.hi).any(|(l, h)| !(h > l)) {
            return Err(Error::InvalidParams("grid needs at least 3 points and lo < hi".into()));
        }
        Ok(())
    }

    fn axis(&self, k: usize) -> Vec<f64> {
        let n = self.n_points;
        let (lo, hi) = (self.lo[k], self.hi[k]);
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    fn refined(&self) -> Self {
        Self {
            n_points: 2 * self.n_points - 1,
            ..self.clone()
        }
    }
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    let h = axis[1] - axis[0];
    (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized conditional density `p(y^H | y^O)` tabulated on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalOracle {
    pub observation: Vector,
    pub partition: Partition,
    pub grid: GridSpec,
    pub axes: Vec<Vec<f64>>,
    /// Row-major (first hidden axis slowest) normalized log-density.
    pub log_table: Vec<f64>,
    /// `log p(y^O)` by quadrature.
    pub log_marginal: f64,
    /// Change of `log p(y^O)` when the grid is refined.
    pub drift: f64,
    pub edge_mass: f64,
}

struct RawTable {
    axes: Vec<Vec<f64>>,
    log_joint: Vec<f64>,
    log_marginal: f64,
}

fn tabulate(flow: &Flow, y_o: &Vector, data: &Partition, grid: &GridSpec) -> Result<RawTable> {
    let d_h = data.d_hidden();
    let axes: Vec<Vec<f64>> = (0..d_h).map(|k| grid.axis(k)).collect();
    let weights: Vec<Vec<f64>> = axes.iter().map(|a| trapezoid_weights(a)).collect();
    let n = grid.n_points;
    let total = n.pow(d_h as u32);
    let mut log_joint = Vec::with_capacity(total);
    let mut log_w = Vec::with_capacity(total);
    for flat in 0..total {
        let mut y_h = Vector::zeros(d_h);
        let mut w = 1.0;
        let mut rem = flat;
        for k in (0..d_h).rev() {
            let i = rem % n;
            rem /= n;
            y_h[k] = axes[k][i];
            w *= weights[k][i];
        }
        log_joint.push(flow.log_density(&data.join(y_o, &y_h)?)?);
        log_w.push(w.ln());
    }
    let log_marginal = log_sum_exp(log_joint.iter().zip(&log_w).map(|(a, b)| a + b));
    if !log_marginal.is_finite() {
        return Err(Error::NonFinite("quadrature marginal"));
    }
    Ok(RawTable {
        axes,
        log_joint,
        log_marginal,
    })
}

/// Pilot grid: conditional moments from a wide coarse grid, then ±6 standard
/// deviations around the mean.
fn default_grid(flow: &Flow, y_o: &Vector, data: &Partition) -> Result<GridSpec> {
    let d_h = data.d_hidden();
    let pilot_n = if d_h == 1 { 801 } else { 161 };
    let pilot = GridSpec {
        lo: vec![-20.0; d_h],
        hi: vec![20.0; d_h],
        n_points: pilot_n,
    };
    let raw = tabulate(flow, y_o, data, &pilot)?;
    let probs: Vec<f64> = raw.log_joint.iter().map(|l| (l - raw.log_marginal).exp()).collect();
    let z: f64 = probs.iter().sum();
    let mut lo = Vec::with_capacity(d_h);
    let mut hi = Vec::with_capacity(d_h);
    for k in 0..d_h {
        let coord = |flat: usize| {
            let stride = pilot_n.pow((d_h - 1 - k) as u32);
            raw.axes[k][(flat / stride) % pilot_n]
        };
        let mean = probs.iter().enumerate().map(|(f, p)| p * coord(f)).sum::<f64>() / z;
        let var = probs.iter().enumerate().map(|(f, p)| p * (coord(f) - mean).powi(2)).sum::<f64>() / z;
        let sd = var.sqrt().max(40.0 / (pilot_n - 1) as f64);
        lo.push(mean - DEFAULT_GRID_HALF_WIDTH * sd);
        hi.push(mean + DEFAULT_GRID_HALF_WIDTH * sd);
    }
    Ok(GridSpec {
        lo,
        hi,
        n_points: DEFAULT_GRID_POINTS,
    })
}

/// Tabulates `p(y^H | y^O)` for `d^H ≤ 2` by trapezoidal quadrature.
///
/// Without an explicit grid the range is ±6 conditional standard deviations
/// from a pilot pass. Fails when refining the grid moves `log p(y^O)` by more
/// than [`MAX_GRID_DRIFT`] or the boundary cells hold more than
/// [`MAX_EDGE_MASS`].
pub fn build_grid_oracle(flow: &Flow, y_o: &Vector, data: &Partition, grid: Option<GridSpec>) -> Result<ConditionalOracle> {
    check_dim(flow.dim(), data.dim(), "data partition dimension")?;
    check_dim(data.d_observed(), y_o.len(), "observation length")?;
    let d_h = data.d_hidden();
    if d_h > 2 {
        return Err(Error::InvalidParams(format!("grid quadrature supports at most 2 hidden coordinates, got {d_h}")));
    }
    let grid = match grid {
        Some(g) => g,
        None => default_grid(flow, y_o, data)?,
    };
    grid.validate(d_h)?;
    let raw = tabulate(flow, y_o, data, &grid)?;
    let fine = tabulate(flow, y_o, data, &grid.refined())?;
    let drift = (fine.log_marginal - raw.log_marginal).abs();
    if drift > MAX_GRID_DRIFT {
        return Err(Error::GridTooCoarse { drift });
    }
    let n = grid.n_points;
    let weights: Vec<Vec<f64>> = raw.axes.iter().map(|a| trapezoid_weights(a)).collect();
    let log_table: Vec<f64> = raw.log_joint.iter().map(|l| l - raw.log_marginal).collect();
    let mut edge_mass = 0.0;
    for (flat, l) in log_table.iter().enumerate() {
        let mut rem = flat;
        let mut on_edge = false;
        let mut w = 1.0;
        for k in (0..d_h).rev() {
            let i = rem % n;
            rem /= n;
            on_edge |= i == 0 || i == n - 1;
            w *= weights[k][i];
        }
        if on_edge {
            edge_mass += l.exp() * w;
        }
    }
    if edge_mass > MAX_EDGE_MASS {
        return Err(Error::GridTruncated { edge_mass });
    }
    Ok(ConditionalOracle {
        observation: y_o.clone(),
        partition: data.clone(),
        grid,
        axes: raw.axes,
        log_table,
        log_marginal: raw.log_marginal,
        drift,
        edge_mass,
    })
}

impl ConditionalOracle {
    pub fn d_hidden(&self) -> usize {
        self.axes.len()
    }

    fn n(&self) -> usize {
        self.grid.n_points
    }

    /// Trapezoid-weighted probability of every grid node; sums to one.
    pub fn node_masses(&self) -> Vec<f64> {
        let n = self.n();
        let weights: Vec<Vec<f64>> = self.axes.iter().map(|a| trapezoid_weights(a)).collect();
        self.log_table
            .iter()
            .enumerate()
            .map(|(flat, l)| {
                let mut rem = flat;
                let mut w = 1.0;
                for k in (0..self.d_hidden()).rev() {
                    w *= weights[k][rem % n];
                    rem /= n;
                }
                l.exp() * w
            })
            .collect()
    }

    /// Density of the marginal of hidden axis `k` at every node of that axis.
    pub fn marginal_density(&self, k: usize) -> Vec<f64> {
        let n = self.n();
        let d_h = self.d_hidden();
        let mut out = vec![0.0; n];
        let other_weights = if d_h == 2 {
            trapezoid_weights(&self.axes[1 - k])
        } else {
            vec![1.0]
        };
        for (flat, l) in self.log_table.iter().enumerate() {
            let (i, j) = if d_h == 1 {
                (flat, 0)
            } else if k == 0 {
                (flat / n, flat % n)
            } else {
                (flat % n, flat / n)
            };
            out[i] += l.exp() * other_weights[j];
        }
        out
    }

    /// Piecewise-linear-density CDF of hidden axis `k` at the nodes.
    pub fn marginal_cdf_nodes(&self, k: usize) -> Vec<f64> {
        let dens = self.marginal_density(k);
        let axis = &self.axes[k];
        let mut cdf = vec![0.0; dens.len()];
        for i in 1..dens.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (axis[i] - axis[i - 1]);
        }
        let total = *cdf.last().expect("grid has nodes");
        cdf.iter_mut().for_each(|c| *c /= total);
        cdf
    }

    /// Marginal CDF of hidden axis `k` at `t`, exact for the trapezoidal density.
    pub fn marginal_cdf(&self, k: usize, t: f64) -> f64 {
        let axis = &self.axes[k];
        let n = axis.len();
        if t <= axis[0] {
            return 0.0;
        }
        if t >= axis[n - 1] {
            return 1.0;
        }
        let dens = self.marginal_density(k);
        let cdf = self.marginal_cdf_nodes(k);
        let total_raw: f64 = (1..n)
            .map(|i| 0.5 * (dens[i] + dens[i - 1]) * (axis[i] - axis[i - 1]))
            .sum();
        let h = axis[1] - axis[0];
        let i = (((t - axis[0]) / h).floor() as usize).min(n - 2);
        let s = t - axis[i];
        let slope = (dens[i + 1] - dens[i]) / h;
        cdf[i] + (dens[i] * s + 0.5 * slope * s * s) / total_raw
    }

    pub fn mean(&self) -> Vector {
        let m = self.node_masses();
        let n = self.n();
        let d_h = self.d_hidden();
        let mut out = Vector::zeros(d_h);
        for (flat, p) in m.iter().enumerate() {
            let mut rem = flat;
            for k in (0..d_h).rev() {
                out[k] += p * self.axes[k][rem % n];
                rem /= n;
            }
        }
        out
    }

    pub fn variance(&self) -> Vector {
        let m = self.node_masses();
        let mu = self.mean();
        let n = self.n();
        let d_h = self.d_hidden();
        let mut out = Vector::zeros(d_h);
        for (flat, p) in m.iter().enumerate() {
            let mut rem = flat;
            for k in (0..d_h).rev() {
                out[k] += p * (self.axes[k][rem % n] - mu[k]).powi(2);
                rem /= n;
            }
        }
        out
    }

    /// Kolmogorov–Smirnov distance of each hidden coordinate of `samples`
    /// (hidden sub-vectors) against the oracle marginals.
    pub fn ks_distance(&self, samples: &[Vector]) -> Vec<f64> {
        (0..self.d_hidden())
            .map(|k| {
                let xs: Vec<f64> = samples.iter().map(|s| s[k]).collect();
                ks_against_cdf(&xs, |t| self.marginal_cdf(k, t))
            })
            .collect()
    }

    /// CSV with one row per grid node: hidden coordinates, log density, mass.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.partition.hidden().iter().map(|j| format!("y{j}")).collect();
        header.push("log_density".into());
        header.push("mass".into());
        w.write_record(&header)?;
        let masses = self.node_masses();
        let n = self.n();
        for (flat, (l, m)) in self.log_table.iter().zip(&masses).enumerate() {
            let mut coords = vec![0.0; self.d_hidden()];
            let mut rem = flat;
            for k in (0..self.d_hidden()).rev() {
                coords[k] = self.axes[k][rem % n];
                rem /= n;
            }
            let mut row: Vec<String> = coords.iter().map(f64::to_string).collect();
            row.push(l.to_string());
            row.push(m.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionSamples {
    /// Hidden sub-vectors `y^H` of the accepted joint draws.
    pub samples: Vec<Vector>,
    pub proposals: usize,
    pub acceptance_rate: f64,
}

/// Joint draws `y = f(x)` kept when `‖y^O − y_o‖∞ < tol_band`; bias is O(tol_band).
pub fn rejection_conditional_sample(
    flow: &Flow,
    y_o: &Vector,
    data: &Partition,
    tol_band: f64,
    n: usize,
    seed: u64,
) -> Result<RejectionSamples> {
    check_dim(flow.dim(), data.dim(), "data partition dimension")?;
    check_dim(data.d_observed(), y_o.len(), "observation length")?;
    if !(tol_band > 0.0) {
        return Err(Error::InvalidParams("tol_band must be positive".into()));
    }
    let mut g = rng::seeded(seed);
    let mut samples = Vec::with_capacity(n);
    let mut proposals = 0usize;
    const CHECK_EVERY: usize = 1_000_000;
    while samples.len() < n {
        let (_, y) = flow.sample(&mut g)?;
        proposals += 1;
        let off = (data.gather_observed(&y) - y_o).amax();
        if off < tol_band {
            samples.push(data.gather_hidden(&y));
        }
        if proposals % CHECK_EVERY == 0 {
            let rate = samples.len() as f64 / proposals as f64;
            if rate < MIN_ACCEPTANCE_RATE {
                return Err(Error::AcceptanceTooLow { rate });
            }
        }
    }
    let acceptance_rate = if proposals == 0 {
        0.0
    } else {
        samples.len() as f64 / proposals as f64
    };
    Ok(RejectionSamples {
        samples,
        proposals,
        acceptance_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImportanceEstimate {
    pub log_marginal: f64,
    /// Jackknife standard error.
    pub std_err: f64,
    pub ess: f64,
    pub n_used: usize,
}

/// Log-mean-exp of log-weights with its jackknife standard error and the
/// effective sample size.
pub fn log_mean_exp_jackknife(log_w: &[f64]) -> (f64, f64, f64) {
    let n = log_w.len();
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    let estimate = m + (s / n as f64).ln();
    let ess = s * s / s2;
    if n < 2 {
        return (estimate, f64::INFINITY, ess);
    }
    let loo: Vec<f64> = w.iter().map(|wi| m + ((s - wi).max(0.0) / (n - 1) as f64).ln()).collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var = (n - 1) as f64 / n as f64 * loo.iter().map(|l| (l - mean).powi(2)).sum::<f64>();
    (estimate, var.sqrt(), ess)
}

/// `log p̂(y^O)` with weights `p(y^O, y^H) / q(y^H | y^O)` from the posterior.
///
/// The log-weight of a draw equals the ELBO integrand, so the estimate upper
/// bounds the ELBO up to Monte Carlo error.
pub fn importance_log_marginal(
    flow: &Flow,
    posterior: &VariationalPosterior,
    y_o: &Vector,
    pair: &PartitionPair,
    n: usize,
    seed: u64,
    solvers: &SolverSettings,
) -> Result<ImportanceEstimate> {
    let draws = posterior_sample(posterior, n, seed)?;
    let mut log_w = Vec::with_capacity(n);
    for d in &draws {
        if let Ok((t, _)) = sample_terms(flow, posterior, d, y_o, pair, solvers) {
            log_w.push(t.total());
        }
    }
    check_failures(n - log_w.len(), n)?;
    let (log_marginal, std_err, ess) = log_mean_exp_jackknife(&log_w);
    if !(ess >= MIN_ESS) {
        return Err(Error::DegenerateWeights { ess });
    }
    Ok(ImportanceEstimate {
        log_marginal,
        std_err,
        ess,
        n_used: log_w.len(),
    })
}

/// Sup-distance between the empirical CDF of `xs` and `cdf`.
pub fn ks_against_cdf(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at level `alpha`.
pub fn ks_critical_value(alpha: f64, n: usize, m: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub rmse: f64,
    pub ks_per_coordinate: Vec<f64>,
    pub tv_on_grid: Option<f64>,
}

/// RMSE between paired rows, per-coordinate two-sample KS, and the total
/// variation between a histogram of `samples` and the oracle's node masses.
pub fn metrics(samples: &[Vector], reference: &[Vector], oracle: Option<&ConditionalOracle>) -> Result<Metrics> {
    let d = samples.first().or(reference.first()).map_or(0, |v| v.len());
    for v in samples.iter().chain(reference) {
        check_dim(d, v.len(), "metric sample dimension")?;
    }
    let pairs = samples.len().min(reference.len());
    let sq: f64 = samples
        .iter()
        .zip(reference)
        .map(|(s, r)| (s - r).norm_squared())
        .sum();
    let rmse = if pairs == 0 { 0.0 } else { (sq / (pairs * d) as f64).sqrt() };
    let ks_per_coordinate = (0..d)
        .map(|k| {
            let a: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            let b: Vec<f64> = reference.iter().map(|s| s[k]).collect();
            ks_two_sample(&a, &b)
        })
        .collect();
    let tv_on_grid = oracle.map(|o| tv_against_oracle(samples, o)).transpose()?;
    Ok(Metrics {
        rmse,
        ks_per_coordinate,
        tv_on_grid,
    })
}

/// Total variation between the nearest-node histogram of `samples` and the
/// oracle's node masses.
pub fn tv_against_oracle(samples: &[Vector], oracle: &ConditionalOracle) -> Result<f64> {
    let d_h = oracle.d_hidden();
    let n = oracle.grid.n_points;
    let mut hist = vec![0.0; oracle.log_table.len()];
    let mut outside = 0.0;
    for s in samples {
        check_dim(d_h, s.len(), "hidden sample dimension")?;
        let mut flat = 0usize;
        let mut inside = true;
        for k in 0..d_h {
            let (lo, hi) = (oracle.grid.lo[k], oracle.grid.hi[k]);
            let h = (hi - lo) / (n - 1) as f64;
            let pos = ((s[k] - lo) / h).round();
            if pos < 0.0 || pos > (n - 1) as f64 {
                inside = false;
                break;
            }
            flat = flat * n + pos as usize;
        }
        if inside {
            hist[flat] += 1.0;
        } else {
            outside += 1.0;
        }
    }
    let total = samples.len().max(1) as f64;
    let masses = oracle.node_masses();
    let inner: f64 = hist.iter().zip(&masses).map(|(h, m)| (h / total - m).abs()).sum();
    Ok(0.5 * (inner + outside / total))
}

/// CSV with one `name,value` row per metric.
pub fn write_metrics_csv<W: Write>(m: &Metrics, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    w.write_record(["rmse".to_string(), m.rmse.to_string()])?;
    for (k, v) in m.ks_per_coordinate.iter().enumerate() {
        w.write_record([format!("ks_{k}"), v.to_string()])?;
    }
    if let Some(tv) = m.tv_on_grid {
        w.write_record(["tv_on_grid".to_string(), tv.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
