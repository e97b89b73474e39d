//! Hutchinson trace estimation with Rademacher probes.
//!
//! For the log-determinant gradients the trace is never evaluated directly:
//! a detached operator `B` is folded into each probe as `w = Bᵀ z`, and the
//! caller differentiates `wᵀ A(x) z`, whose expectation is `Tr(B A(x))`.

use super::{LinearOperator, Vector};
use crate::error::{check_dim, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct HutchinsonProbe {
    pub probe: Vector,
    pub adjoint_probe: Vector,
}

#[derive(Debug, Clone, Copy)]
pub struct TraceEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_probes: usize,
}

pub fn hutchinson_trace_grad_weight(
    op: &dyn LinearOperator,
    rng_seed: u64,
    n_probes: usize,
) -> Result<Vec<HutchinsonProbe>> {
    check_dim(op.rows(), op.cols(), "hutchinson needs a square operator")?;
    let mut g = rng::seeded(rng_seed);
    (0..n_probes)
        .map(|_| {
            let z = rng::rademacher(&mut g, op.rows());
            let w = op.apply_adjoint(&z)?;
            Ok(HutchinsonProbe {
                probe: z,
                adjoint_probe: w,
            })
        })
        .collect()
}

/// Estimates `Tr(op)` as the mean of `zᵀ op z`.
pub fn hutchinson_trace(op: &dyn LinearOperator, rng_seed: u64, n_probes: usize) -> Result<TraceEstimate> {
    let probes = hutchinson_trace_grad_weight(op, rng_seed, n_probes)?;
    let samples: Vec<f64> = probes.iter().map(|p| p.adjoint_probe.dot(&p.probe)).collect();
    Ok(summarize(&samples))
}

pub(crate) fn summarize(samples: &[f64]) -> TraceEstimate {
    let n = samples.len();
    if n == 0 {
        return TraceEstimate {
            mean: f64::NAN,
            std_err: f64::NAN,
            n_probes: 0,
        };
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    TraceEstimate {
        mean,
        std_err: (var / n as f64).sqrt(),
        n_probes: n,
    }
}
