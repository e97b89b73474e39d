use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use viscos::checks::{all_pass, run_suite, write_checks_csv, Suite};
use viscos::numerics::{Precision, Tolerances};
use viscos::partition::{make_partition, Partition, PartitionPair};
use viscos::solvers::{solve_constraint, write_trace_csv};
use viscos::training::{
    gen_dataset, imputation_rmse, impute_amortized, mean_nll, mle_train, train_incomplete, write_epoch_csv, Dataset,
    TrainMode,
};
use viscos::viscos::{
    amortized_infer, conditional_sample, elbo_estimate, fit_conditional, InferenceNetwork, PosteriorDocument,
};
use viscos::{rng, Error, Flow, Vector};

use crate::config::RunConfig;
use crate::Common;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::DimensionMismatch { .. }
            | Error::InvalidIndices(_)
            | Error::InvalidParams(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Format(_) => EXIT_USAGE,
            _ => EXIT_NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

type Outcome = Result<u8, Failure>;

struct Run {
    cfg: RunConfig,
    verbose: bool,
    tolerances: Tolerances,
}

impl Run {
    fn new(common: &Common) -> Result<Self, Failure> {
        let mut cfg = RunConfig::load(common.config.as_deref()).map_err(|e| Failure::usage(e.0))?;
        if let Some(seed) = common.seed {
            cfg.override_seed(seed);
        }
        if let Some(out) = &common.out {
            cfg.out = out.clone();
        }
        let precision = Precision::from_env().map_err(Failure::usage)?;
        std::fs::create_dir_all(&cfg.out)?;
        Ok(Self {
            cfg,
            verbose: common.verbose,
            tolerances: Tolerances::for_precision(precision),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    /// Writes the resolved configuration next to the outputs.
    fn echo_config(&self, command: &str) -> Result<(), Failure> {
        std::fs::write(self.path(&format!("{command}.config.toml")), self.cfg.to_toml())?;
        Ok(())
    }

    fn load_flow(&self, path: &Path) -> Result<Flow, Failure> {
        let mut flow = Flow::load(path)?;
        flow.tolerances = self.tolerances;
        Ok(flow)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Dataset), Failure> {
    let d = &cfg.data;
    let full = match &d.path {
        Some(p) => Dataset::read_csv(File::open(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?, "csv")?,
        None => gen_dataset(d.kind, d.n, d.dim, d.seed, &d.params)?,
    };
    if d.n_test >= full.len() {
        return Err(Failure::usage(format!(
            "n_test = {} leaves no training data out of {} rows",
            d.n_test,
            full.len()
        )));
    }
    let (mut train, mut test) = full.split(d.n_test);
    if cfg.train.missingness > 0.0 {
        train = train.with_missingness(cfg.train.missingness, rng::derive_seed(d.seed, 1))?;
        test = test.with_missingness(cfg.train.missingness, rng::derive_seed(d.seed, 2))?;
    }
    Ok((train, test))
}

pub fn train(common: &Common) -> Outcome {
    let run = Run::new(common)?;
    let cfg = &run.cfg;
    let (train, test) = load_dataset(cfg)?;
    run.echo_config("train")?;
    let mut f0 = Flow::random(&cfg.flow.shape(train.dim), &mut rng::seeded(cfg.seed));
    f0.tolerances = run.tolerances;
    run.log(format!("training on {} items of dimension {}", train.len(), train.dim));

    let incomplete = cfg.train.mode == TrainMode::Incomplete;
    let out = if incomplete {
        let net = InferenceNetwork::new(
            train.medians(),
            cfg.train.inference_hidden,
            &mut rng::seeded(rng::derive_seed(cfg.seed, 1)),
        );
        train_incomplete(&f0, &net, &train, &cfg.train)?
    } else {
        mle_train(&f0, &train, &cfg.train)?
    };
    for e in &out.epochs {
        run.log(format!("epoch {} lr {:.3e} loss {:.5}", e.epoch, e.lr, e.loss));
    }
    out.flow.save(run.path("flow.json"))?;
    write_epoch_csv(&out.epochs, run.create("train_loss.csv")?)?;

    let complete: Vec<Vector> = (0..test.len())
        .filter(|&i| test.is_complete(i))
        .map(|i| test.samples[i].clone())
        .collect();
    let nll = if complete.is_empty() {
        f64::NAN
    } else {
        mean_nll(&out.flow, &complete)? / train.dim as f64
    };
    let mut summary = csv::Writer::from_writer(run.create("train_summary.csv")?);
    summary.write_record(["metric", "value"]).map_err(Error::from)?;
    summary
        .write_record(["test_nll_per_dim".to_string(), nll.to_string()])
        .map_err(Error::from)?;
    if let Some(net) = &out.network {
        net.save(run.path("network.json"))?;
        if test.masks.is_some() {
            let med = train.medians();
            let baseline = imputation_rmse(&test, |_, y, p| Ok(fill(y, p, &med)))?;
            let seed = cfg.train.seed;
            let rmse = imputation_rmse(&test, |i, y, p| {
                impute_amortized(&out.flow, net, y, p, 16, rng::derive_seed(seed, i as u64), &cfg.train.solvers)
            })?;
            summary
                .write_record(["imputation_rmse".to_string(), rmse.to_string()])
                .map_err(Error::from)?;
            summary
                .write_record(["median_fill_rmse".to_string(), baseline.to_string()])
                .map_err(Error::from)?;
        }
    }
    summary.flush()?;
    println!("test_nll_per_dim {nll:.6}");
    if let Some(reason) = &out.aborted {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("training aborted: {reason}"),
        });
    }
    Ok(0)
}

fn fill(y: &Vector, p: &Partition, values: &Vector) -> Vector {
    let mut g = y.clone();
    for &j in p.hidden() {
        g[j] = values[j];
    }
    g
}

/// Observation rows with their data partitions.
fn observations(cfg: &RunConfig, dim: usize) -> Result<Vec<(Vector, Partition)>, Failure> {
    let c = &cfg.condition;
    let mut rows = Vec::new();
    for v in &c.values {
        if v.len() != dim {
            return Err(Failure::usage(format!("observation row has {} values, flow has {dim}", v.len())));
        }
        rows.push((Vector::from_vec(v.clone()), make_partition(&c.observed, dim)?));
    }
    if let Some(p) = &c.observations {
        let file = File::open(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        let ds = Dataset::read_csv(file, "observations")?;
        if ds.dim != dim {
            return Err(Failure::usage(format!("observations have {} columns, flow has {dim}", ds.dim)));
        }
        for i in 0..ds.len() {
            let part = if ds.masks.is_some() {
                ds.partition(i)?
            } else {
                make_partition(&c.observed, dim)?
            };
            rows.push((ds.samples[i].clone(), part));
        }
    }
    if rows.is_empty() {
        return Err(Failure::usage("no observations: set condition.values or condition.observations"));
    }
    Ok(rows)
}

pub fn condition(common: &Common, checkpoint: &Path) -> Outcome {
    let run = Run::new(common)?;
    let cfg = &run.cfg;
    let flow = run.load_flow(checkpoint)?;
    let rows = observations(cfg, flow.dim())?;
    cfg.fit.validate()?;
    run.echo_config("condition")?;
    let network = match &cfg.condition.network {
        Some(p) => Some(InferenceNetwork::load(p)?),
        None => None,
    };

    let mut summary = csv::Writer::from_writer(run.create("conditions.csv")?);
    summary
        .write_record(["row", "final_elbo", "elbo_std_err", "kl_to_base", "failed_steps", "status"])
        .map_err(Error::from)?;
    let mut aborted = None;
    for (k, (y, data)) in rows.iter().enumerate() {
        let y_o = data.gather_observed(y);
        let fitted = match &network {
            Some(net) => {
                let q = amortized_infer(net, y, data)?;
                let pair = PartitionPair::aligned(data.clone());
                let seed = rng::derive_seed(cfg.fit.seed, k as u64);
                elbo_estimate(&flow, &q, &y_o, &pair, cfg.fit.final_elbo_samples, seed, &cfg.fit.solvers)
                    .map(|e| (q.kl_to_standard_normal(), Some(e), 0, pair, q, None))
            }
            None => {
                let fc = viscos::viscos::FitConfig {
                    seed: rng::derive_seed(cfg.fit.seed, k as u64),
                    ..cfg.fit.clone()
                };
                fit_conditional(&flow, &y_o, data, &fc).map(|r| {
                    let kl = r.last().map_or(f64::NAN, |s| s.kl_to_base);
                    (kl, r.final_elbo, r.failed_steps, r.partitions.clone(), r.posterior.clone(), Some(r))
                })
            }
        };
        match fitted {
            Ok((kl, elbo, failed_steps, pair, q, report)) => {
                let (value, se) = elbo.map_or((f64::NAN, f64::NAN), |e| (e.value, e.std_err));
                run.log(format!("row {k}: elbo {value:.5} ± {se:.5}, kl {kl:.5}"));
                PosteriorDocument::new(&q, &pair.latent, &pair.data, &y_o).save(run.path(&format!("posterior_{k}.json")))?;
                if let Some(r) = &report {
                    r.write_csv(run.create(&format!("report_{k}.csv"))?)?;
                }
                if run.verbose {
                    let s = &cfg.fit.solvers;
                    let sol = solve_constraint(&flow, &y_o, &q.mu, &pair, &s.fixed_point, &s.newton_krylov)?;
                    write_trace_csv(&sol.trace, run.create(&format!("trace_{k}.csv"))?)?;
                }
                summary
                    .write_record([
                        k.to_string(),
                        value.to_string(),
                        se.to_string(),
                        kl.to_string(),
                        failed_steps.to_string(),
                        "ok".to_string(),
                    ])
                    .map_err(Error::from)?;
            }
            Err(e) => {
                let failure = Failure::from(e);
                if failure.code != EXIT_NUMERICAL {
                    return Err(failure);
                }
                run.log(format!("row {k}: {}", failure.message));
                summary
                    .write_record([
                        k.to_string(),
                        "NaN".into(),
                        "NaN".into(),
                        "NaN".into(),
                        String::new(),
                        failure.message.clone(),
                    ])
                    .map_err(Error::from)?;
                aborted.get_or_insert(failure);
            }
        }
    }
    summary.flush()?;
    match aborted {
        Some(f) => Err(f),
        None => Ok(0),
    }
}

pub fn sample(common: &Common, checkpoint: &Path, posterior: &Path, n: Option<usize>) -> Outcome {
    let run = Run::new(common)?;
    let mut cfg = run.cfg.clone();
    if let Some(n) = n {
        cfg.sample.n = n;
    }
    let flow = run.load_flow(checkpoint)?;
    let doc = PosteriorDocument::load(posterior)?;
    if doc.dim != flow.dim() {
        return Err(Failure::usage(format!("posterior is {}-dimensional, flow is {}", doc.dim, flow.dim())));
    }
    let pair = doc.partitions()?;
    let q = doc.posterior()?;
    let y_o = doc.observation();
    Run { cfg: cfg.clone(), ..run }.echo_config("sample")?;
    let out = conditional_sample(&flow, &q, &y_o, &pair, cfg.sample.n, cfg.sample.seed, &cfg.fit.solvers)?;

    let mut w = BufWriter::new(File::create(cfg.out.join("samples.csv"))?);
    writeln!(w, "# checkpoint={}", checkpoint.display())?;
    writeln!(w, "# posterior={}", posterior.display())?;
    writeln!(w, "# n={} seed={} failures={}", cfg.sample.n, cfg.sample.seed, out.failures)?;
    let mut c = csv::Writer::from_writer(w);
    c.write_record((0..flow.dim()).map(|j| format!("y{j}"))).map_err(Error::from)?;
    for s in &out.samples {
        c.write_record(s.iter().map(|v| v.to_string())).map_err(Error::from)?;
    }
    c.flush()?;
    println!("samples {} failures {}", out.samples.len(), out.failures);
    if out.failures as f64 > 0.2 * cfg.sample.n as f64 {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("constraint solver failed on {} of {} draws", out.failures, cfg.sample.n),
        });
    }
    Ok(0)
}

pub fn check(common: &Common, checkpoint: &Path, suite: Suite) -> Outcome {
    let run = Run::new(common)?;
    let flow = run.load_flow(checkpoint)?;
    run.echo_config("check")?;
    let rows = run_suite(&flow, suite, &run.cfg.check);
    write_checks_csv(&rows, run.create("checks.csv")?)?;
    for r in &rows {
        println!(
            "{} {} value {:.3e} threshold {:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.value,
            r.threshold
        );
    }
    Ok(if all_pass(&rows) { 0 } else { EXIT_CHECK_FAILED })
}
