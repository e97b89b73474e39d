//! Producing pre-trained flows: maximum likelihood on complete data and
//! joint flow/inference-network training on incomplete data.

mod data;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use data::{digit_glyph, gen_dataset, Dataset, DatasetKind, DatasetParams, TINY_DIGITS_DIM, TINY_DIGITS_SIDE};

use crate::error::{Error, Result};
use crate::flows::{Flow, FlowGrads};
use crate::linalg::Vector;
use crate::numerics::LN_2PI;
use crate::optim::{Adam, AdamConfig};
use crate::partition::PartitionPair;
use crate::rng;
use crate::viscos::amortized::InferenceNetwork;
use crate::viscos::elbo::{sample_gradient, GradientConfig, SolverSettings};
use crate::viscos::fit::conditional_sample;
use crate::viscos::posterior::posterior_sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam settings; `optimizer.lr` is the initial rate.
    pub optimizer: AdamConfig,
    /// Multiplier applied to the rate after every epoch.
    pub lr_decay: f64,
    pub missingness: f64,
    pub mode: TrainMode,
    /// Power iterations used by the spectral normalization after each update.
    pub n_power_iter: usize,
    pub inference_hidden: usize,
    pub gradient: GradientConfig,
    pub solvers: SolverSettings,
    pub max_failure_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            lr_decay: 0.5,
            missingness: 0.0,
            mode: TrainMode::Complete,
            n_power_iter: 20,
            inference_hidden: 64,
            gradient: GradientConfig::default(),
            solvers: SolverSettings::default(),
            max_failure_rate: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::InvalidParams("learning rate and decay must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.missingness) {
            return Err(Error::InvalidParams("missingness must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.max_failure_rate) {
            return Err(Error::InvalidParams("max_failure_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate during epoch `e` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.optimizer.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-item loss in nats (NLL, or −ELBO for incomplete items).
    pub loss: f64,
    pub items: usize,
    pub failed_items: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub flow: Flow,
    pub network: Option<InferenceNetwork>,
    pub epochs: Vec<EpochRecord>,
    /// Mean loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Set when training stopped early; the returned models are the last good ones.
    pub aborted: Option<String>,
}

pub fn write_epoch_csv<W: Write>(epochs: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "lr", "loss", "items", "failed_items"])?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.loss.to_string(),
            e.items.to_string(),
            e.failed_items.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `−log p(y)` and its gradient with respect to the flow parameters.
///
/// With `x = g(y)`, the latent moves with the parameters as `dx = −J⁻¹ ∂f`,
/// so the implicit part enters the sweep as the output adjoint `−J⁻ᵀ ∂L/∂x`.
pub fn nll_and_grad(flow: &Flow, y: &Vector) -> Result<(f64, FlowGrads)> {
    let x = flow.inverse(y)?;
    let lin = flow.linearize(&x)?;
    let logdet = lin.logabsdet()?;
    let loss = 0.5 * (x.norm_squared() + x.len() as f64 * LN_2PI) + logdet;
    let (ld_x, ld_params) = lin.logabsdet_grad(true)?;
    let dl_dx = &x + ld_x;
    let adjoint = -lin.inv_vjp(&dl_dx)?;
    let (_, Some(mut grads)) = lin.reverse_sweep(Some(&adjoint), &lin.empty_seeds(), true) else {
        unreachable!("parameters requested")
    };
    grads.axpy(1.0, &ld_params.expect("parameters requested"));
    Ok((loss, grads))
}

/// Mean negative log-likelihood in nats per sample.
pub fn mean_nll(flow: &Flow, samples: &[Vector]) -> Result<f64> {
    let mut total = 0.0;
    for y in samples {
        total -= flow.log_density(y)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

struct Batches<'a> {
    data: &'a Dataset,
    cfg: &'a TrainConfig,
}

impl Batches<'_> {
    fn epoch(&self, e: usize) -> Vec<Vec<usize>> {
        let idx = self.data.shuffled_indices(rng::derive_seed(self.cfg.seed, e as u64));
        idx.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Maximum-likelihood training with spectral renormalization after every update.
pub fn mle_train(flow: &Flow, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.masks.as_ref().is_some_and(|_| (0..data.len()).any(|i| !data.is_complete(i))) {
        return Err(Error::InvalidParams("maximum-likelihood training needs complete data".into()));
    }
    if data.dim != flow.dim() {
        return Err(Error::DimensionMismatch {
            expected: flow.dim(),
            got: data.dim,
            context: "dataset dimension",
        });
    }
    let mut flow = flow.clone();
    let mut params = flow.params_flat();
    let mut adam = Adam::new(cfg.optimizer, params.len());
    let mut out = TrainOutcome {
        flow: flow.clone(),
        network: None,
        epochs: Vec::new(),
        step_losses: Vec::new(),
        aborted: None,
    };
    let batches = Batches { data, cfg };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut sum, mut items) = (0.0, 0);
        for batch in batches.epoch(epoch) {
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            let mut failure = None;
            for &i in &batch {
                match nll_and_grad(&flow, &data.samples[i]) {
                    Ok((l, g)) => {
                        loss += l;
                        for (a, b) in grad.iter_mut().zip(g.flatten()) {
                            *a += b;
                        }
                    }
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            let n = batch.len() as f64;
            loss /= n;
            if failure.is_none() && !(loss.is_finite() && finite(&grad)) {
                failure = Some("non-finite loss or gradient".into());
            }
            if let Some(reason) = failure {
                out.aborted = Some(format!("epoch {epoch}: {reason}"));
                return Ok(out);
            }
            grad.iter_mut().for_each(|g| *g /= n);
            adam.step_with_lr(&mut params, &grad, lr);
            flow.set_params_flat(&params)?;
            flow.renormalize(cfg.n_power_iter);
            params = flow.params_flat();
            if !finite(&params) {
                out.aborted = Some(format!("epoch {epoch}: non-finite parameters"));
                return Ok(out);
            }
            out.flow = flow.clone();
            out.step_losses.push(loss);
            sum += loss * n;
            items += batch.len();
        }
        out.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: sum / items.max(1) as f64,
            items,
            failed_items: 0,
        });
    }
    Ok(out)
}

/// Joint training of the flow and the amortized inference network.
///
/// Complete items contribute their exact NLL; items with hidden coordinates
/// contribute `−ELBO` with a single posterior draw and the configured LAD
/// estimator. Items whose constraint solve fails are skipped and counted; a
/// batch with too many failures is skipped entirely.
pub fn train_incomplete(
    flow: &Flow,
    network: &InferenceNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.dim != flow.dim() || network.dim() != flow.dim() {
        return Err(Error::DimensionMismatch {
            expected: flow.dim(),
            got: if data.dim != flow.dim() { data.dim } else { network.dim() },
            context: "dataset or network dimension",
        });
    }
    if data.masks.is_none() {
        let mut out = mle_train(flow, data, cfg)?;
        out.network = Some(network.clone());
        return Ok(out);
    }
    let mut flow = flow.clone();
    let mut net = network.clone();
    let mut flow_params = flow.params_flat();
    let mut net_params = net.params_flat();
    let mut flow_adam = Adam::new(cfg.optimizer, flow_params.len());
    let mut net_adam = Adam::new(cfg.optimizer, net_params.len());
    let mut out = TrainOutcome {
        flow: flow.clone(),
        network: Some(net.clone()),
        epochs: Vec::new(),
        step_losses: Vec::new(),
        aborted: None,
    };
    let batches = Batches { data, cfg };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut sum, mut items, mut failed_items) = (0.0, 0, 0);
        for batch in batches.epoch(epoch) {
            let step_seed = rng::derive_seed(cfg.seed ^ 0x5EED, step);
            step += 1;
            let mut probe_rng = rng::seeded(step_seed);
            let mut g_flow = vec![0.0; flow_params.len()];
            let mut g_net = vec![0.0; net_params.len()];
            let (mut loss, mut ok) = (0.0, 0usize);
            for (k, &i) in batch.iter().enumerate() {
                let y = &data.samples[i];
                if data.is_complete(i) {
                    let Ok((l, g)) = nll_and_grad(&flow, y) else { continue };
                    loss += l;
                    ok += 1;
                    for (a, b) in g_flow.iter_mut().zip(g.flatten()) {
                        *a += b;
                    }
                    continue;
                }
                let part = data.partition(i)?;
                let pair = PartitionPair::aligned(part.clone());
                let input = net.fill_input(y, &part)?;
                let act = net.forward(&input)?;
                let q = net.posterior_from(&act, &part)?;
                let y_o = part.gather_observed(y);
                let draw = posterior_sample(&q, 1, rng::derive_seed(step_seed, k as u64 + 1))?.remove(0);
                let Ok(sg) = sample_gradient(&flow, &q, &draw, &y_o, &pair, &cfg.solvers, &cfg.gradient, &mut probe_rng, true)
                else {
                    continue;
                };
                ok += 1;
                // Loss is −ELBO: descend along the negated ascent directions.
                loss -= sg.terms.total();
                let dh = q.dim();
                let g_mu = Vector::from_column_slice(&sg.posterior_grad[..dh]);
                let g_ls = Vector::from_column_slice(&sg.posterior_grad[dh..2 * dh]);
                let up = net.output_grad(&part, &g_mu, &g_ls);
                for (a, b) in g_net.iter_mut().zip(net.backward(&act, &up)?) {
                    *a -= b;
                }
                for (a, b) in g_flow.iter_mut().zip(sg.flow_grad.expect("flow gradient requested").flatten()) {
                    *a -= b;
                }
            }
            let failed = batch.len() - ok;
            failed_items += failed;
            if ok == 0 || failed as f64 > cfg.max_failure_rate * batch.len() as f64 {
                continue;
            }
            let n = ok as f64;
            loss /= n;
            g_flow.iter_mut().for_each(|g| *g /= n);
            g_net.iter_mut().for_each(|g| *g /= n);
            if !(loss.is_finite() && finite(&g_flow) && finite(&g_net)) {
                out.aborted = Some(format!("epoch {epoch}: non-finite loss or gradient"));
                return Ok(out);
            }
            flow_adam.step_with_lr(&mut flow_params, &g_flow, lr);
            net_adam.step_with_lr(&mut net_params, &g_net, lr);
            flow.set_params_flat(&flow_params)?;
            flow.renormalize(cfg.n_power_iter);
            flow_params = flow.params_flat();
            net.set_params_flat(&net_params)?;
            if !finite(&flow_params) || !finite(&net_params) {
                out.aborted = Some(format!("epoch {epoch}: non-finite parameters"));
                return Ok(out);
            }
            out.flow = flow.clone();
            out.network = Some(net.clone());
            out.step_losses.push(loss);
            sum += loss * n;
            items += ok;
        }
        if items + failed_items > 0 && failed_items as f64 > cfg.max_failure_rate * (items + failed_items) as f64 {
            return Err(Error::TooManySolverFailures {
                failed: failed_items,
                total: items + failed_items,
            });
        }
        out.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: sum / items.max(1) as f64,
            items,
            failed_items,
        });
    }
    Ok(out)
}

/// Imputes the hidden coordinates of `y` as the mean of `n` completions drawn
/// from the amortized posterior.
pub fn impute_amortized(
    flow: &Flow,
    net: &InferenceNetwork,
    y: &Vector,
    data: &crate::partition::Partition,
    n: usize,
    seed: u64,
    solvers: &SolverSettings,
) -> Result<Vector> {
    let q = crate::viscos::amortized::amortized_infer(net, y, data)?;
    let pair = PartitionPair::aligned(data.clone());
    let y_o = data.gather_observed(y);
    let s = conditional_sample(flow, &q, &y_o, &pair, n, seed, solvers)?;
    let mean = s.samples.iter().fold(Vector::zeros(flow.dim()), |a, v| a + v) / s.samples.len().max(1) as f64;
    Ok(data.join(&y_o, &data.gather_hidden(&mean))?)
}

/// Root-mean-square error over hidden entries of a masked dataset.
pub fn imputation_rmse<F>(data: &Dataset, mut impute: F) -> Result<f64>
where
    F: FnMut(usize, &Vector, &crate::partition::Partition) -> Result<Vector>,
{
    let (mut sq, mut count) = (0.0, 0usize);
    for i in 0..data.len() {
        if data.is_complete(i) {
            continue;
        }
        let part = data.partition(i)?;
        let y = &data.samples[i];
        let guess = impute(i, y, &part)?;
        for &j in part.hidden() {
            sq += (guess[j] - y[j]).powi(2);
            count += 1;
        }
    }
    Ok((sq / count.max(1) as f64).sqrt())
}
