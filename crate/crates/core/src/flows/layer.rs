use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::linalg::{spectral_norm, Matrix, Vector};
use crate::rng;

/// Pointwise nonlinearity of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `z·sigmoid(z)/1.1`, smooth with slope bounded by 1.
    #[default]
    LipSwish,
    /// Makes the block affine; used to build linear flows for the oracles.
    Identity,
}

const LIPSWISH_SCALE: f64 = 1.1;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::LipSwish => z * sigmoid(z) / LIPSWISH_SCALE,
            Activation::Identity => z,
        }
    }

    pub fn slope(self, z: f64) -> f64 {
        match self {
            Activation::LipSwish => {
                let s = sigmoid(z);
                (s + z * s * (1.0 - s)) / LIPSWISH_SCALE
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn curvature(self, z: f64) -> f64 {
        match self {
            Activation::LipSwish => {
                let s = sigmoid(z);
                s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s)) / LIPSWISH_SCALE
            }
            Activation::Identity => 0.0,
        }
    }

    /// Upper bound on `|slope|`.
    pub fn slope_bound(self) -> f64 {
        1.0
    }
}

/// One block `x ↦ x + W2·φ(W1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer {
    /// hidden × dim
    pub w1: Matrix,
    pub b1: Vector,
    /// dim × hidden
    pub w2: Matrix,
    pub b2: Vector,
    pub lipschitz_bound: f64,
    pub activation: Activation,
}

impl ResidualLayer {
    pub fn zeros(dim: usize, hidden: usize, lipschitz_bound: f64) -> Self {
        Self {
            w1: Matrix::zeros(hidden, dim),
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(dim, hidden),
            b2: Vector::zeros(dim),
            lipschitz_bound,
            activation: Activation::LipSwish,
        }
    }

    /// Gaussian initialization followed by spectral normalization to `lipschitz_bound`.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        hidden: usize,
        lipschitz_bound: f64,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let w1 = rng::standard_normal(rng, hidden * dim) * (init_scale / (dim as f64).sqrt());
        let w2 = rng::standard_normal(rng, hidden * dim) * (init_scale / (hidden as f64).sqrt());
        let b1 = rng::standard_normal(rng, hidden) * (0.1 * init_scale);
        let layer = Self {
            w1: Matrix::from_column_slice(hidden, dim, w1.as_slice()),
            b1,
            w2: Matrix::from_column_slice(dim, hidden, w2.as_slice()),
            b2: Vector::zeros(dim),
            lipschitz_bound,
            activation: Activation::LipSwish,
        };
        spectral_normalize(&layer, lipschitz_bound, 50)
    }

    pub fn dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn pre_activation(&self, x: &Vector) -> Vector {
        &self.w1 * x + &self.b1
    }

    pub fn residual(&self, x: &Vector) -> Vector {
        let z = self.pre_activation(x);
        &self.w2 * z.map(|v| self.activation.value(v)) + &self.b2
    }

    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len(), "residual layer input")?;
        Ok(x + self.residual(x))
    }

    /// Dense `I + W2 diag(φ'(z)) W1` at `x`.
    pub fn jacobian(&self, x: &Vector) -> Matrix {
        let slope = self.pre_activation(x).map(|v| self.activation.slope(v));
        jacobian_from_slope(self, &slope)
    }

    /// Certified Lipschitz bound of the residual branch from exact singular values.
    pub fn lipschitz_estimate(&self) -> f64 {
        spectral_norm(&self.w1) * spectral_norm(&self.w2) * self.activation.slope_bound()
    }

    pub(crate) fn num_params(&self) -> usize {
        2 * self.w1.len() + self.b1.len() + self.b2.len()
    }
}

pub(crate) fn jacobian_from_slope(layer: &ResidualLayer, slope: &Vector) -> Matrix {
    let mut scaled = layer.w1.clone();
    for (k, mut row) in scaled.row_iter_mut().enumerate() {
        row *= slope[k];
    }
    let mut j = &layer.w2 * scaled;
    for i in 0..j.nrows() {
        j[(i, i)] += 1.0;
    }
    j
}

/// Power-iteration estimate of the largest singular value.
pub fn power_iteration_norm(m: &Matrix, n_iter: usize) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let n = m.ncols();
    let mut v = Vector::from_fn(n, |i, _| 1.0 + 0.37 * (i as f64 + 1.0).sin());
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..n_iter.max(1) {
        let u = m * &v;
        let un = u.norm();
        if un == 0.0 {
            return 0.0;
        }
        let w = m.tr_mul(&(u / un));
        sigma = w.norm();
        if sigma == 0.0 {
            return 0.0;
        }
        v = w / sigma;
    }
    sigma
}

/// Rescales `m` so that its power-iteration norm estimate is at most `target`.
pub fn normalize_matrix(m: &Matrix, target: f64, n_power_iter: usize) -> Matrix {
    let sigma = power_iteration_norm(m, n_power_iter);
    if sigma > target {
        m * (target / sigma)
    } else {
        m.clone()
    }
}

/// Rescales both weight matrices so the block's Lipschitz constant is at most `target`.
pub fn spectral_normalize(layer: &ResidualLayer, target: f64, n_power_iter: usize) -> ResidualLayer {
    assert!(target > 0.0 && target < 1.0, "Lipschitz target must lie in (0, 1)");
    let per_matrix = target.sqrt();
    ResidualLayer {
        w1: normalize_matrix(&layer.w1, per_matrix, n_power_iter),
        w2: normalize_matrix(&layer.w2, per_matrix, n_power_iter),
        lipschitz_bound: target,
        ..layer.clone()
    }
}
