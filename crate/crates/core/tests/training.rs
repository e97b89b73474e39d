use viscos::checks::{run_suite, CheckConfig, Suite};
use viscos::flows::FlowShape;
use viscos::linalg::dense_logabsdet;
use viscos::training::{
    gen_dataset, imputation_rmse, impute_amortized, mean_nll, mle_train, train_incomplete, DatasetKind, DatasetParams,
    TrainConfig, TrainMode,
};
use viscos::viscos::{InferenceNetwork, SolverSettings};
use viscos::{rng, Flow};

const LOG_2PI_E: f64 = 2.837877066409345;

#[test]
fn zero_initialized_flow_on_standard_normal_data() {
    let params = DatasetParams {
        rho: 0.0,
        ..Default::default()
    };
    let ds = gen_dataset(DatasetKind::CorrelatedGauss, 4000, 2, 1, &params).unwrap();
    let (train, test) = ds.split(2000);
    let f0 = Flow::identity(2, 4, 8);
    let out = mle_train(&f0, &train, &TrainConfig { epochs: 3, ..Default::default() }).unwrap();
    let nll = mean_nll(&out.flow, &test.samples).unwrap() / 2.0;
    assert!((nll - 0.5 * LOG_2PI_E).abs() < 0.05, "nll/dim {nll}");
}

#[test]
fn correlated_gaussian_reaches_analytic_nll() {
    let d = 8;
    let params = DatasetParams::default();
    let ds = gen_dataset(DatasetKind::CorrelatedGauss, 5000, d, 2, &params).unwrap();
    let (train, test) = ds.split(2000);
    let mut shape = FlowShape::new(d);
    shape.hidden = 32;
    let f0 = Flow::random(&shape, &mut rng::seeded(3));
    let out = mle_train(&f0, &train, &TrainConfig { epochs: 4, ..Default::default() }).unwrap();
    let sigma = params.covariance_matrix(d).unwrap();
    let analytic = 0.5 * (LOG_2PI_E + dense_logabsdet(&sigma).unwrap() / d as f64);
    let nll = mean_nll(&out.flow, &test.samples).unwrap() / d as f64;
    assert!((nll - analytic).abs() < 0.1, "nll/dim {nll} vs {analytic}");

    let losses: Vec<f64> = out.epochs.iter().map(|e| e.loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{losses:?}");

    let rows = run_suite(&out.flow, Suite::Identities, &CheckConfig::default());
    assert!(rows.iter().all(|r| r.pass), "{rows:?}");
}

#[test]
fn incomplete_training_beats_median_fill() {
    let d = 8;
    let full = gen_dataset(DatasetKind::CorrelatedGauss, 1300, d, 11, &DatasetParams::default()).unwrap();
    let (train, test) = full.split(300);
    let train = train.with_missingness(0.5, 1).unwrap();
    let test = test.with_missingness(0.5, 2).unwrap();
    let f0 = Flow::random(&FlowShape::new(d), &mut rng::seeded(3));
    let net = InferenceNetwork::new(train.medians(), 64, &mut rng::seeded(4));
    let cfg = TrainConfig {
        epochs: 2,
        mode: TrainMode::Incomplete,
        missingness: 0.5,
        ..Default::default()
    };
    let out = train_incomplete(&f0, &net, &train, &cfg).unwrap();
    assert!(out.aborted.is_none());
    let net = out.network.unwrap();
    let med = train.medians();
    let baseline = imputation_rmse(&test, |_, y, p| {
        let mut g = y.clone();
        for &j in p.hidden() {
            g[j] = med[j];
        }
        Ok(g)
    })
    .unwrap();
    let s = SolverSettings::default();
    let rmse = imputation_rmse(&test, |i, y, p| impute_amortized(&out.flow, &net, y, p, 16, i as u64, &s)).unwrap();
    assert!(rmse <= 0.8 * baseline, "rmse {rmse} vs median fill {baseline}");
    let rows = run_suite(&out.flow, Suite::Identities, &CheckConfig::default());
    assert!(rows.iter().all(|r| r.pass), "{rows:?}");
}
