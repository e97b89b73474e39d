use proptest::prelude::*;
use viscos::flows::FlowShape;
use viscos::linalg::{dense_logabsdet, finite_diff_jacobian, singular_values, GmresConfig, LinearOperator};
use viscos::partition::{
    block_score, make_partition, scatter, select_latent_partition, InverseStrategy, PartitionPair, PartitionedJacobian,
};
use viscos::{rng, Flow, Matrix, Vector};

fn flow(seed: u64, dim: usize) -> Flow {
    let mut shape = FlowShape::new(dim);
    shape.layers = 4;
    shape.hidden = 16;
    shape.init_scale = 2.0;
    Flow::random(&shape, &mut rng::seeded(seed))
}

fn random_pair(g: &mut impl rand::Rng, d: usize) -> PartitionPair {
    use rand::seq::SliceRandom;
    let d_o = g.random_range(1..d);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(g);
    PartitionPair::aligned(make_partition(&idx[..d_o], d).unwrap())
}

proptest! {
    #[test]
    fn join_inverts_gather(d in 2usize..12, seed in any::<u64>()) {
        let mut g = rng::seeded(seed);
        let pair = random_pair(&mut g, d);
        let p = &pair.data;
        prop_assert_eq!(p.d_observed() + p.d_hidden(), d);
        prop_assert!(p.observed().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(p.hidden().iter().all(|h| !p.observed().contains(h)));
        let x = rng::standard_normal(&mut g, d);
        prop_assert_eq!(p.join(&p.gather_observed(&x), &p.gather_hidden(&x)).unwrap(), x.clone());
        let back = scatter(&p.gather_observed(&x), p.observed(), d) + scatter(&p.gather_hidden(&x), p.hidden(), d);
        prop_assert_eq!(back, x);
    }

    #[test]
    fn invalid_index_sets_are_rejected(d in 2usize..10, extra in 0usize..5) {
        let all: Vec<usize> = (0..d).collect();
        prop_assert!(make_partition(&all, d).is_err());
        prop_assert!(make_partition(&[], d).is_err());
        prop_assert!(make_partition(&[d + extra], d).is_err());
        prop_assert!(make_partition(&[0, 0], d).is_err());
    }
}

#[test]
fn schur_identities_hold_across_dimensions() {
    let mut g = rng::seeded(3);
    for (k, d) in [4usize, 8, 16].into_iter().cycle().take(9).enumerate() {
        let f = flow(100 + k as u64, d);
        let pair = random_pair(&mut g, d);
        let x = rng::standard_normal(&mut g, d);
        let b = PartitionedJacobian::new(&f, &x, &pair).unwrap().dense().unwrap();

        let lhs = dense_logabsdet(&b.j).unwrap();
        let rhs = dense_logabsdet(&b.j_oo).unwrap() - dense_logabsdet(&b.g_hh).unwrap();
        assert!((lhs - rhs).abs() < 1e-6, "determinant identity d={d}: {lhs} vs {rhs}");

        let inv_oo = b.j_oo.clone().try_inverse().unwrap();
        let schur = &b.j_hh - &b.j_ho * &inv_oo * &b.j_oh;
        let n = schur.nrows();
        assert!((&b.g_hh * &schur - Matrix::identity(n, n)).amax() < 1e-6, "inverse identity d={d}");

        let recip = &b.g_oo - &b.g_oh * b.g_hh.clone().try_inverse().unwrap() * &b.g_ho;
        assert!((recip - inv_oo).amax() < 1e-6, "reciprocal identity d={d}");
    }
}

#[test]
fn schur_strategy_inverts_forward_view() {
    let f = flow(7, 8);
    let mut g = rng::seeded(8);
    let gm = GmresConfig {
        tol: 1e-12,
        ..Default::default()
    };
    for _ in 0..5 {
        let pair = random_pair(&mut g, 8);
        let x = rng::standard_normal(&mut g, 8);
        let pj = PartitionedJacobian::new(&f, &x, &pair).unwrap();
        let v = rng::standard_normal(&mut g, pair.data.d_observed());
        let w = pj.solve_oo(&v, InverseStrategy::Schur, &gm).unwrap().x;
        assert!((pj.j_oo().apply(&w).unwrap() - &v).amax() < 1e-6);
    }
}

#[test]
fn off_diagonal_view_matches_finite_differences() {
    let f = flow(9, 8);
    let x = rng::standard_normal(&mut rng::seeded(10), 8);
    let pair = PartitionPair::aligned(make_partition(&[0, 2, 5], 8).unwrap());
    let pj = PartitionedJacobian::new(&f, &x, &pair).unwrap();
    let (o, h) = (pair.data.observed(), pair.data.hidden());
    let view = pj.j_oh();
    let dense = Matrix::from_columns(
        &(0..h.len())
            .map(|k| view.apply(&Vector::from_fn(h.len(), |i, _| if i == k { 1.0 } else { 0.0 })).unwrap())
            .collect::<Vec<_>>(),
    );
    let fd = finite_diff_jacobian(|v| f.forward(v).unwrap(), &x, 1e-5);
    let fd_oh = Matrix::from_fn(o.len(), h.len(), |i, k| fd[(o[i], h[k])]);
    assert!((dense - fd_oh).amax() < 1e-6);
}

#[test]
fn sub_jacobians_are_nonsingular_at_random_points() {
    let mut g = rng::seeded(11);
    for d in [3usize, 6, 10] {
        let f = flow(20 + d as u64, d);
        for _ in 0..10 {
            let pair = random_pair(&mut g, d);
            let x = rng::standard_normal(&mut g, d);
            let b = PartitionedJacobian::new(&f, &x, &pair).unwrap().dense().unwrap();
            assert!(singular_values(&b.j_oo).min() > 1e-8);
        }
    }
}

#[test]
fn greedy_selection_against_exhaustive_search() {
    let f = flow(30, 4);
    let data = make_partition(&[0, 1], 4).unwrap();
    let mut g = rng::seeded(31);
    for _ in 0..10 {
        let x = rng::standard_normal(&mut g, 4);
        let j = f.linearize(&x).unwrap().jacobian();
        let mut best = f64::NEG_INFINITY;
        for a in 0..4 {
            for b in a + 1..4 {
                best = best.max(block_score(&j, data.observed(), &[a, b]));
            }
        }
        let aligned = block_score(&j, data.observed(), data.observed());
        let chosen = select_latent_partition(&f, &x, &data, 10).unwrap();
        let score = block_score(&j, data.observed(), chosen.observed());
        assert!(score >= aligned);
        assert!(score <= best + 1e-12);
        // A single-swap local maximum: no swap improves it.
        for &o in chosen.observed() {
            for &h in chosen.hidden() {
                let cols: Vec<usize> = chosen.observed().iter().map(|&i| if i == o { h } else { i }).collect();
                assert!(block_score(&j, data.observed(), &cols) <= score + 1e-12);
            }
        }
    }
}
