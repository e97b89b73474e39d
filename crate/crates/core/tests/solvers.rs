use viscos::flows::FlowShape;
use viscos::linalg::{inf_norm, GmresConfig};
use viscos::partition::{make_partition, PartitionPair};
use viscos::solvers::{
    estimate_lipschitz_product, fixed_point_solve, newton_krylov_solve, solve_constraint, theorem1_contraction_matrix,
    Constraint, FixedPointConfig, NewtonKrylovConfig, SolveMethod,
};
use viscos::training::{gen_dataset, mle_train, DatasetKind, DatasetParams, TrainConfig};
use viscos::{rng, Flow, Vector};

fn flow(seed: u64, dim: usize, layers: usize, lipschitz: f64) -> Flow {
    let mut shape = FlowShape::new(dim);
    shape.layers = layers;
    shape.hidden = 16;
    shape.lipschitz = lipschitz;
    shape.init_scale = 2.0;
    Flow::random(&shape, &mut rng::seeded(seed))
}

fn problem(f: &Flow, seed: u64, observed: &[usize]) -> (PartitionPair, Vector, Vector) {
    let pair = PartitionPair::aligned(make_partition(observed, f.dim()).unwrap());
    let x = rng::standard_normal(&mut rng::seeded(seed), f.dim());
    let y = f.forward(&x).unwrap();
    (pair.clone(), pair.data.gather_observed(&y), pair.latent.gather_hidden(&x))
}

#[test]
fn undamped_iteration_contracts_at_predicted_rate() {
    let plain = FixedPointConfig {
        alpha0: 1.0,
        beta0: 1.0,
        decay: 1.0,
        tol: 1e-10,
        max_iter: 200,
    };
    let mut trials = 0;
    for seed in 0..80u64 {
        let f = flow(seed, 4, 2, 0.4);
        let (pair, y_o, x_h) = problem(&f, 1000 + seed, &[0, 2]);
        let est = estimate_lipschitz_product(&f, &pair, 20, seed).unwrap();
        if est.product >= 0.8 {
            continue;
        }
        trials += 1;
        let r = fixed_point_solve(&f, &y_o, &x_h, &pair, &plain).unwrap();
        let (_, rho) = theorem1_contraction_matrix(est.l_a, est.l_b, 1.0, 1.0);
        let res: Vec<f64> = r.trace.iter().map(|t| t.residual).filter(|&v| v > 1e-13).collect();
        if res.len() >= 2 {
            let rate = (res[res.len() - 1] / res[0]).powf(1.0 / (res.len() - 1) as f64);
            assert!(rate <= rho + 0.05, "seed {seed}: rate {rate} vs rho {rho}");
        }
        if trials == 50 {
            break;
        }
    }
    assert_eq!(trials, 50);
}

#[test]
fn default_schedule_reaches_threshold_on_trained_flow() {
    let ds = gen_dataset(DatasetKind::CorrelatedGauss, 1200, 4, 2, &DatasetParams::default()).unwrap();
    let mut shape = FlowShape::new(4);
    shape.layers = 4;
    shape.hidden = 16;
    let f0 = Flow::random(&shape, &mut rng::seeded(3));
    let f = mle_train(&f0, &ds, &TrainConfig { epochs: 2, ..Default::default() }).unwrap().flow;
    let fp = FixedPointConfig::default();
    let nk = NewtonKrylovConfig::default();
    for k in 0..20 {
        let (pair, y_o, x_h) = problem(&f, 50 + k, &[1, 3]);
        let r = solve_constraint(&f, &y_o, &x_h, &pair, &fp, &nk).unwrap();
        assert!(r.residual <= 1e-3);
        let c = Constraint::new(&f, &y_o, &x_h, &pair).unwrap();
        assert!(inf_norm(&(c.g_o(&r.y_h).unwrap() - &r.x_o)) <= 1e-3);
        assert!(inf_norm(&(c.f_h(&r.x_o).unwrap() - &r.y_h)) <= 1e-3);
    }
}

#[test]
fn contractive_regime_needs_no_fallback() {
    let f = flow(5, 6, 8, 0.5);
    for k in 0..10 {
        let (pair, y_o, x_h) = problem(&f, 60 + k, &[0, 1, 3]);
        let r = solve_constraint(&f, &y_o, &x_h, &pair, &FixedPointConfig::default(), &NewtonKrylovConfig::default())
            .unwrap();
        assert_eq!(r.method, SolveMethod::FixedPoint);
    }
}

#[test]
fn near_critical_regime_falls_back_and_converges() {
    let f = flow(6, 6, 8, 0.99);
    let fp = FixedPointConfig {
        max_iter: 5,
        ..Default::default()
    };
    let nk = NewtonKrylovConfig::default();
    let mut hybrid = 0;
    for k in 0..10 {
        let (pair, y_o, x_h) = problem(&f, 70 + k, &[0, 2, 4]);
        let r = solve_constraint(&f, &y_o, &x_h, &pair, &fp, &nk).unwrap();
        assert!(r.residual < nk.tol);
        hybrid += (r.method == SolveMethod::Hybrid) as usize;
    }
    assert!(hybrid > 0);
}

#[test]
fn fixed_point_and_newton_agree_within_ten_tol() {
    let tol = 1e-8;
    let fp = FixedPointConfig {
        tol,
        max_iter: 2000,
        ..Default::default()
    };
    let nk = NewtonKrylovConfig {
        tol,
        gmres: GmresConfig {
            tol: 1e-12,
            ..Default::default()
        },
        ..Default::default()
    };
    let f = flow(7, 8, 4, 0.7);
    for k in 0..10 {
        let (pair, y_o, x_h) = problem(&f, 80 + k, &[0, 1, 2, 3, 4]);
        let (Ok(a), Ok(b)) = (
            fixed_point_solve(&f, &y_o, &x_h, &pair, &fp),
            newton_krylov_solve(&f, &y_o, &x_h, &pair, &nk, None),
        ) else {
            continue;
        };
        assert!((a.x_o - b.x_o).amax() <= 10.0 * tol * 10.0, "problem {k}");
    }
}
