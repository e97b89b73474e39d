use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{householder_apply, householder_apply_transpose, householder_vjp, Vector};
use crate::partition::Partition;
use crate::rng;

use crate::numerics::LN_2PI;

/// Gaussian `x^H = μ + (H_1 ⋯ H_n) D(σ) ε` over the hidden latent block.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub mu: Vector,
    pub log_sigma: Vector,
    pub reflectors: Vec<Vector>,
}

/// One draw with the noise that produced it.
#[derive(Debug, Clone)]
pub struct PosteriorDraw {
    pub eps: Vector,
    pub x: Vector,
}

impl VariationalPosterior {
    /// Standard normal (`μ = 0`, `σ = 1`); reflectors are drawn at random.
    pub fn standard<R: Rng + ?Sized>(dim: usize, n_reflectors: usize, rng: &mut R) -> Self {
        Self {
            mu: Vector::zeros(dim),
            log_sigma: Vector::zeros(dim),
            reflectors: (0..n_reflectors).map(|_| rng::standard_normal(rng, dim)).collect(),
        }
    }

    pub fn mean_field(mu: Vector, log_sigma: Vector) -> Result<Self> {
        check_dim(mu.len(), log_sigma.len(), "posterior scale")?;
        Ok(Self {
            mu,
            log_sigma,
            reflectors: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vector {
        self.log_sigma.map(f64::exp)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim(), self.log_sigma.len(), "posterior log_sigma")?;
        for v in &self.reflectors {
            check_dim(self.dim(), v.len(), "posterior reflector")?;
        }
        let finite = self.mu.iter().chain(self.log_sigma.iter()).chain(self.reflectors.iter().flatten());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior parameters"));
        }
        Ok(())
    }

    pub fn transform(&self, eps: &Vector) -> Result<Vector> {
        check_dim(self.dim(), eps.len(), "posterior noise")?;
        let scaled = eps.component_mul(&self.sigma());
        Ok(&self.mu + householder_apply(&self.reflectors, &scaled)?)
    }

    /// `log q(x)`; the orthogonal factor leaves only the diagonal scale term.
    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len(), "posterior point")?;
        let s = householder_apply_transpose(&self.reflectors, &(x - &self.mu))?;
        let eps = s.component_div(&self.sigma());
        Ok(-0.5 * (eps.norm_squared() + self.dim() as f64 * LN_2PI) - self.log_sigma.sum())
    }

    /// `log q` at the draw produced by `eps`.
    pub fn log_density_of_noise(&self, eps: &Vector) -> f64 {
        -0.5 * (eps.norm_squared() + self.dim() as f64 * LN_2PI) - self.log_sigma.sum()
    }

    /// `∇ₓ log q(x)` at the draw produced by `eps`, parameters held fixed.
    pub fn score_of_noise(&self, eps: &Vector) -> Result<Vector> {
        let inner = eps.component_div(&self.sigma());
        Ok(-householder_apply(&self.reflectors, &inner)?)
    }

    pub fn entropy(&self) -> f64 {
        0.5 * self.dim() as f64 * (1.0 + LN_2PI) + self.log_sigma.sum()
    }

    /// `KL(q ‖ N(0, I))`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        let var: f64 = self.log_sigma.iter().map(|l| (2.0 * l).exp()).sum();
        0.5 * (var + self.mu.norm_squared() - self.dim() as f64 - 2.0 * self.log_sigma.sum())
    }

    pub fn num_params(&self) -> usize {
        self.dim() * (2 + self.reflectors.len())
    }

    /// `μ`, `log σ`, then every reflector.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.mu.as_slice());
        out.extend_from_slice(self.log_sigma.as_slice());
        for v in &self.reflectors {
            out.extend_from_slice(v.as_slice());
        }
        out
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        check_dim(self.num_params(), p.len(), "flat posterior parameters")?;
        let d = self.dim();
        self.mu.copy_from_slice(&p[..d]);
        self.log_sigma.copy_from_slice(&p[d..2 * d]);
        for (i, v) in self.reflectors.iter_mut().enumerate() {
            v.copy_from_slice(&p[(2 + i) * d..(3 + i) * d]);
        }
        Ok(())
    }

    /// Parameter gradient of `⟨upstream, x(θ, ε)⟩`, laid out as [`Self::params_flat`].
    pub fn pathwise_grad(&self, eps: &Vector, upstream: &Vector) -> Result<Vec<f64>> {
        let sigma = self.sigma();
        let s = eps.component_mul(&sigma);
        let g = householder_vjp(&self.reflectors, &s, upstream)?;
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(upstream.as_slice());
        out.extend(g.input.iter().zip(s.iter()).map(|(a, b)| a * b));
        for r in &g.reflectors {
            out.extend_from_slice(r.as_slice());
        }
        Ok(out)
    }
}

/// `n` reparametrized draws from a seeded stream.
pub fn posterior_sample(posterior: &VariationalPosterior, n: usize, rng_seed: u64) -> Result<Vec<PosteriorDraw>> {
    posterior.validate()?;
    let mut g = rng::seeded(rng_seed);
    (0..n)
        .map(|_| {
            let eps = rng::standard_normal(&mut g, posterior.dim());
            let x = posterior.transform(&eps)?;
            Ok(PosteriorDraw { eps, x })
        })
        .collect()
}

/// On-disk posterior together with the problem it was fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorDocument {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub reflectors: Vec<Vec<f64>>,
    pub latent_partition: Vec<usize>,
    pub data_partition: Vec<usize>,
    pub dim: usize,
    /// Observed values in the order of `data_partition`.
    pub observation: Vec<f64>,
}

impl PosteriorDocument {
    pub fn new(posterior: &VariationalPosterior, latent: &Partition, data: &Partition, y_o: &Vector) -> Self {
        Self {
            mu: posterior.mu.iter().copied().collect(),
            log_sigma: posterior.log_sigma.iter().copied().collect(),
            reflectors: posterior.reflectors.iter().map(|v| v.iter().copied().collect()).collect(),
            latent_partition: latent.observed().to_vec(),
            data_partition: data.observed().to_vec(),
            dim: data.dim(),
            observation: y_o.iter().copied().collect(),
        }
    }

    pub fn posterior(&self) -> Result<VariationalPosterior> {
        let p = VariationalPosterior {
            mu: Vector::from_vec(self.mu.clone()),
            log_sigma: Vector::from_vec(self.log_sigma.clone()),
            reflectors: self.reflectors.iter().map(|v| Vector::from_vec(v.clone())).collect(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn partitions(&self) -> Result<crate::partition::PartitionPair> {
        let latent = crate::partition::make_partition(&self.latent_partition, self.dim)?;
        let data = crate::partition::make_partition(&self.data_partition, self.dim)?;
        let pair = crate::partition::PartitionPair::new(latent, data)?;
        check_dim(pair.latent.d_hidden(), self.mu.len(), "posterior dimension")?;
        check_dim(pair.data.d_observed(), self.observation.len(), "observation length")?;
        Ok(pair)
    }

    pub fn observation(&self) -> Vector {
        Vector::from_vec(self.observation.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
