#![allow(dead_code)]

use viscos::flows::FlowShape;
use viscos::training::{gen_dataset, mle_train, DatasetKind, DatasetParams, TrainConfig};
use viscos::{rng, Flow};

/// Partition-safe 2-D flow briefly fitted to two moons.
pub fn moons_flow() -> Flow {
    let ds = gen_dataset(DatasetKind::TwoMoons, 3000, 2, 1, &DatasetParams::default()).unwrap();
    let mut shape = FlowShape::partition_safe(2, 2);
    shape.hidden = 32;
    let f0 = Flow::random(&shape, &mut rng::seeded(2));
    mle_train(&f0, &ds, &TrainConfig { epochs: 4, ..Default::default() }).unwrap().flow
}

/// Small flow fitted to the correlated Gaussian in `dim` dimensions.
pub fn gauss_flow(dim: usize, epochs: usize) -> Flow {
    let ds = gen_dataset(DatasetKind::CorrelatedGauss, 1500, dim, 3, &DatasetParams::default()).unwrap();
    let mut shape = FlowShape::new(dim);
    shape.layers = 4;
    shape.hidden = 16;
    let f0 = Flow::random(&shape, &mut rng::seeded(4));
    mle_train(&f0, &ds, &TrainConfig { epochs, ..Default::default() }).unwrap().flow
}

/// Nonlinear 6-D flow fitted to the Gaussian mixture.
pub fn mixture_flow() -> Flow {
    let ds = gen_dataset(DatasetKind::GaussMixture, 2000, 6, 3, &DatasetParams::default()).unwrap();
    let mut shape = FlowShape::new(6);
    shape.hidden = 32;
    let f0 = Flow::random(&shape, &mut rng::seeded(4));
    mle_train(&f0, &ds, &TrainConfig { epochs: 3, ..Default::default() }).unwrap().flow
}
