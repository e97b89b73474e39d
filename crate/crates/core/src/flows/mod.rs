//! Residual normalizing flows `f = f_L ∘ ⋯ ∘ f_1`, `f_l(x) = x + h_l(x)`.
//!
//! The flow maps latent `x` to data `y`. Each block has Lipschitz constant
//! below one, so the inverse is a per-block Banach iteration and the inverse
//! Jacobian is a per-block Neumann series.

mod backprop;
mod io;
mod layer;
mod linearize;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, inf_norm, Vector};
use crate::numerics::Tolerances;

pub use backprop::{FlowGrads, LayerGrads, LayerSeed};
pub use io::{FlowDocument, LayerDocument, FLOW_FORMAT_VERSION};
pub use layer::{
    normalize_matrix, power_iteration_norm, spectral_normalize, Activation, ResidualLayer,
};
pub use linearize::Linearization;

/// Iteration cap of the per-block Banach inverse.
pub const MAX_INVERSE_STEPS: usize = 200;

use crate::numerics::LN_2PI;

/// Factorized base density of the latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    #[default]
    StdNormal,
}

impl BaseDistribution {
    /// Log-density of any sub-vector; factorization makes this additive over partitions.
    pub fn log_density(&self, x: &Vector) -> f64 {
        match self {
            BaseDistribution::StdNormal => -0.5 * (x.norm_squared() + x.len() as f64 * LN_2PI),
        }
    }

    pub fn grad_log_density(&self, x: &Vector) -> Vector {
        match self {
            BaseDistribution::StdNormal => -x,
        }
    }
}

/// Shape of a freshly initialized flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowShape {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub lipschitz: f64,
    /// Scale of the Gaussian weight initialization before normalization.
    pub init_scale: f64,
}

impl FlowShape {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: 8,
            hidden: 64,
            lipschitz: 0.9,
            init_scale: 1.0,
        }
    }

    /// Shape whose layers compose to `id + r` with `Lip(r) <= 0.9`, so every
    /// partitioned restriction `x^O -> f^O(x^O; x^H)` is a diffeomorphism.
    pub fn partition_safe(dim: usize, layers: usize) -> Self {
        let layers = layers.max(1);
        Self {
            layers,
            lipschitz: 1.9f64.powf(1.0 / layers as f64) - 1.0,
            ..Self::new(dim)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    layers: Vec<ResidualLayer>,
    dim: usize,
    pub base: BaseDistribution,
    pub tolerances: Tolerances,
}

impl Flow {
    pub fn new(dim: usize, layers: Vec<ResidualLayer>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParams("flow dimension must be positive".into()));
        }
        for l in &layers {
            check_dim(dim, l.dim(), "layer dimension")?;
            check_dim(l.hidden(), l.b1.len(), "layer bias b1")?;
            check_dim(dim, l.b2.len(), "layer bias b2")?;
            check_dim(l.hidden(), l.w2.ncols(), "layer w2 columns")?;
        }
        Ok(Self {
            layers,
            dim,
            base: BaseDistribution::StdNormal,
            tolerances: Tolerances::default(),
        })
    }

    /// Flow whose residual branches are identically zero, so `f(x) = x`.
    pub fn identity(dim: usize, n_layers: usize, hidden: usize) -> Self {
        let layers = (0..n_layers).map(|_| ResidualLayer::zeros(dim, hidden, 0.9)).collect();
        Self::new(dim, layers).expect("identity flow is well formed")
    }

    pub fn random<R: Rng + ?Sized>(shape: &FlowShape, rng: &mut R) -> Self {
        let layers = (0..shape.layers)
            .map(|_| {
                ResidualLayer::random(shape.dim, shape.hidden, shape.lipschitz, shape.init_scale, rng)
            })
            .collect();
        Self::new(shape.dim, layers).expect("random flow is well formed")
    }

    /// Affine flow `y = A x + c` built from `Identity`-activation blocks.
    pub fn linear_from_layers(dim: usize, blocks: Vec<(crate::linalg::Matrix, crate::linalg::Matrix)>) -> Result<Self> {
        let layers = blocks
            .into_iter()
            .map(|(w1, w2)| {
                let hidden = w1.nrows();
                let lip = (crate::linalg::spectral_norm(&w1) * crate::linalg::spectral_norm(&w2)).max(1e-3);
                ResidualLayer {
                    w1,
                    b1: Vector::zeros(hidden),
                    w2,
                    b2: Vector::zeros(dim),
                    lipschitz_bound: lip,
                    activation: Activation::Identity,
                }
            })
            .collect();
        Self::new(dim, layers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bound on `Lip(f - id)`, from `prod (1 + L_l) - 1`. Below one, every
    /// restriction `f^O(.; x^H)` is identity plus a contraction.
    pub fn offset_lipschitz(&self) -> f64 {
        self.layers.iter().map(|l| 1.0 + l.lipschitz_estimate()).product::<f64>() - 1.0
    }

    pub fn is_partition_safe(&self) -> bool {
        self.offset_lipschitz() < 1.0
    }

    pub fn layers(&self) -> &[ResidualLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ResidualLayer] {
        &mut self.layers
    }

    /// `y = f(x)`.
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim, x.len(), "flow input")?;
        let mut y = x.clone();
        for layer in &self.layers {
            y += layer.residual(&y);
            if !all_finite(&y) {
                return Err(Error::NonFinite("flow forward"));
            }
        }
        Ok(y)
    }

    /// `x = g(y)` with the default inverse tolerance.
    pub fn inverse(&self, y: &Vector) -> Result<Vector> {
        self.inverse_with_tol(y, self.tolerances.inverse)
    }

    /// Inverts block by block with `x ← y_l − h_l(x)`, then checks `‖f(x) − y‖∞ ≤ tol`.
    pub fn inverse_with_tol(&self, y: &Vector, tol: f64) -> Result<Vector> {
        check_dim(self.dim, y.len(), "flow inverse input")?;
        // Error made in block l is amplified by at most ∏_{k>l}(1 + Lip_k) on the way out.
        let mut amplification = 1.0;
        let mut x = y.clone();
        for layer in self.layers.iter().rev() {
            let layer_tol = 0.5 * tol / amplification;
            let target = x.clone();
            let mut iterations = 0;
            loop {
                let next = &target - layer.residual(&x);
                let step = inf_norm(&(&next - &x));
                x = next;
                iterations += 1;
                if !all_finite(&x) {
                    return Err(Error::NonFinite("flow inverse"));
                }
                let floor = 4.0 * f64::EPSILON * inf_norm(&x).max(1.0);
                if step <= layer_tol || step <= floor {
                    break;
                }
                if iterations >= MAX_INVERSE_STEPS {
                    return Err(Error::NoConvergence {
                        residual: step,
                        iterations,
                    });
                }
            }
            amplification *= 1.0 + layer.lipschitz_bound.max(0.0);
        }
        let residual = inf_norm(&(self.forward(&x)? - y));
        if residual > tol {
            return Err(Error::NoConvergence {
                residual,
                iterations: MAX_INVERSE_STEPS,
            });
        }
        Ok(x)
    }

    /// Records the forward pass at `x` for Jacobian products.
    pub fn linearize(&self, x: &Vector) -> Result<Linearization<'_>> {
        Linearization::new(self, x)
    }

    /// `J(x) v`.
    pub fn jvp(&self, x: &Vector, v: &Vector) -> Result<Vector> {
        self.linearize(x)?.jvp(v)
    }

    /// `J(x)ᵀ u`, the row vector `uᵀ J(x)` as a column.
    pub fn vjp(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        self.linearize(x)?.vjp(u)
    }

    /// `J(x)⁻ᵀ u`, i.e. `uᵀ G(f(x))`, by truncated Neumann series.
    pub fn inv_vjp(&self, x: &Vector, u: &Vector, trunc_tol: f64) -> Result<Vector> {
        self.linearize(x)?.inv_vjp_with_tol(u, trunc_tol)
    }

    /// `J(x)⁻¹ v = G(f(x)) v`, by truncated Neumann series.
    pub fn inv_jvp(&self, x: &Vector, v: &Vector, trunc_tol: f64) -> Result<Vector> {
        self.linearize(x)?.inv_jvp_with_tol(v, trunc_tol)
    }

    /// `log p(y) = log p₀(g(y)) − log|det J(g(y))|`.
    pub fn log_density(&self, y: &Vector) -> Result<f64> {
        let x = self.inverse(y)?;
        self.log_density_latent(&x)
    }

    /// `log p(f(x))` evaluated from the latent side.
    pub fn log_density_latent(&self, x: &Vector) -> Result<f64> {
        let lin = self.linearize(x)?;
        Ok(self.base.log_density(x) - lin.logabsdet()?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vector, Vector)> {
        let x = crate::rng::standard_normal(rng, self.dim);
        let y = self.forward(&x)?;
        Ok((x, y))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    /// Parameters flattened layer by layer as `w1, b1, w2, b2` (column-major matrices).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w1.as_slice());
            out.extend_from_slice(l.b1.as_slice());
            out.extend_from_slice(l.w2.as_slice());
            out.extend_from_slice(l.b2.as_slice());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len(), "flat flow parameters")?;
        let mut off = 0;
        for l in &mut self.layers {
            for dst in [
                l.w1.as_mut_slice(),
                l.b1.as_mut_slice(),
                l.w2.as_mut_slice(),
                l.b2.as_mut_slice(),
            ] {
                let n = dst.len();
                dst.copy_from_slice(&params[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Re-applies spectral normalization to every block.
    pub fn renormalize(&mut self, n_power_iter: usize) {
        for l in &mut self.layers {
            if l.activation == Activation::LipSwish {
                *l = spectral_normalize(l, l.lipschitz_bound, n_power_iter);
            }
        }
    }

    /// Largest certified block Lipschitz constant.
    pub fn max_lipschitz(&self) -> f64 {
        self.layers.iter().map(|l| l.lipschitz_estimate()).fold(0.0, f64::max)
    }
}
