use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::posterior::VariationalPosterior;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::partition::{gather, scatter, Partition};
use crate::rng;

pub const NETWORK_FORMAT_VERSION: u32 = 1;

/// Median-filled observation → (μ, log σ) for every coordinate.
///
/// One ReLU hidden layer. The output layer starts at zero, so an untrained
/// network yields the standard normal posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceNetwork {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    /// Per-coordinate fill values (training-set medians).
    pub fill: Vector,
}

pub struct NetworkActivations {
    pub input: Vector,
    pub pre: Vector,
    pub output: Vector,
}

impl InferenceNetwork {
    pub fn new<R: Rng + ?Sized>(fill: Vector, hidden: usize, rng: &mut R) -> Self {
        let d = fill.len();
        let scale = (2.0 / d.max(1) as f64).sqrt();
        let w1 = Matrix::from_iterator(hidden, d, rng::standard_normal(rng, hidden * d).iter().map(|v| v * scale));
        Self {
            w1,
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(2 * d, hidden),
            b2: Vector::zeros(2 * d),
            fill,
        }
    }

    pub fn dim(&self) -> usize {
        self.fill.len()
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    /// Replaces unobserved slots of `y` with the fill values.
    pub fn fill_input(&self, y: &Vector, data: &Partition) -> Result<Vector> {
        check_dim(self.dim(), y.len(), "network input")?;
        check_dim(self.dim(), data.dim(), "mask dimension")?;
        let mut x = y.clone();
        for &i in data.hidden() {
            x[i] = self.fill[i];
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Vector) -> Result<NetworkActivations> {
        check_dim(self.dim(), input.len(), "network input")?;
        let pre = &self.w1 * input + &self.b1;
        let h = pre.map(|v| v.max(0.0));
        let output = &self.w2 * h + &self.b2;
        Ok(NetworkActivations {
            input: input.clone(),
            pre,
            output,
        })
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice()].concat()
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        check_dim(self.num_params(), p.len(), "flat network parameters")?;
        let mut off = 0;
        for dst in [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ] {
            let n = dst.len();
            dst.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Parameter gradient for an upstream gradient on the output.
    pub fn backward(&self, act: &NetworkActivations, upstream: &Vector) -> Result<Vec<f64>> {
        check_dim(2 * self.dim(), upstream.len(), "network output gradient")?;
        let h = act.pre.map(|v| v.max(0.0));
        let g_w2 = upstream * h.transpose();
        let g_h = self.w2.tr_mul(upstream);
        let g_pre = g_h.zip_map(&act.pre, |g, z| if z > 0.0 { g } else { 0.0 });
        let g_w1 = &g_pre * act.input.transpose();
        Ok([g_w1.as_slice(), g_pre.as_slice(), g_w2.as_slice(), upstream.as_slice()].concat())
    }

    /// Gathers the hidden-indexed outputs into a mean-field posterior.
    pub fn posterior_from(&self, act: &NetworkActivations, latent: &Partition) -> Result<VariationalPosterior> {
        let d = self.dim();
        let mu = gather(&act.output.rows(0, d).into_owned(), latent.hidden());
        let log_sigma = gather(&act.output.rows(d, d).into_owned(), latent.hidden());
        VariationalPosterior::mean_field(mu, log_sigma)
    }

    /// Output gradient from gradients on `(μ, log σ)` of the hidden coordinates.
    pub fn output_grad(&self, latent: &Partition, g_mu: &Vector, g_log_sigma: &Vector) -> Vector {
        let d = self.dim();
        let mut out = Vector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&scatter(g_mu, latent.hidden(), d));
        out.rows_mut(d, d).copy_from(&scatter(g_log_sigma, latent.hidden(), d));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetworkDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<NetworkDocument>(text)?.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Mean-field posterior for `y` with unobserved slots per `data`; the latent
/// partition is aligned with the data partition.
pub fn amortized_infer(net: &InferenceNetwork, y: &Vector, data: &Partition) -> Result<VariationalPosterior> {
    let input = net.fill_input(y, data)?;
    net.posterior_from(&net.forward(&input)?, data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub version: u32,
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub fill: Vec<f64>,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<&InferenceNetwork> for NetworkDocument {
    fn from(n: &InferenceNetwork) -> Self {
        Self {
            version: NETWORK_FORMAT_VERSION,
            dim: n.dim(),
            hidden: n.hidden(),
            w1: rows_of(&n.w1),
            b1: n.b1.iter().copied().collect(),
            w2: rows_of(&n.w2),
            b2: n.b2.iter().copied().collect(),
            fill: n.fill.iter().copied().collect(),
        }
    }
}

impl TryFrom<NetworkDocument> for InferenceNetwork {
    type Error = Error;

    fn try_from(doc: NetworkDocument) -> Result<Self> {
        if doc.version != NETWORK_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported network version {}", doc.version)));
        }
        let (d, h) = (doc.dim, doc.hidden);
        check_dim(h, doc.b1.len(), "network b1")?;
        check_dim(2 * d, doc.b2.len(), "network b2")?;
        check_dim(d, doc.fill.len(), "network fill")?;
        let net = Self {
            w1: matrix_from_rows(&doc.w1, h, d, "w1")?,
            b1: Vector::from_vec(doc.b1),
            w2: matrix_from_rows(&doc.w2, 2 * d, h, "w2")?,
            b2: Vector::from_vec(doc.b2),
            fill: Vector::from_vec(doc.fill),
        };
        if net.params_flat().iter().chain(net.fill.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::finite_diff_jacobian;
    use crate::partition::make_partition;

    fn net(seed: u64) -> InferenceNetwork {
        let mut n = InferenceNetwork::new(Vector::from_vec(vec![0.5, -0.25, 1.0, 0.0]), 6, &mut rng::seeded(seed));
        let mut g = rng::seeded(seed + 1);
        n.w2 = Matrix::from_iterator(8, 6, rng::standard_normal(&mut g, 48).iter().copied());
        n.b1 = rng::standard_normal(&mut g, 6);
        n
    }

    #[test]
    fn untrained_network_gives_standard_posterior() {
        let n = InferenceNetwork::new(Vector::zeros(3), 5, &mut rng::seeded(0));
        let data = make_partition(&[1], 3).unwrap();
        let q = amortized_infer(&n, &Vector::from_vec(vec![9.0, 1.0, -3.0]), &data).unwrap();
        assert_eq!(q.mu, Vector::zeros(2));
        assert_eq!(q.log_sigma, Vector::zeros(2));
        assert!(q.reflectors.is_empty());
    }

    #[test]
    fn missing_slots_are_filled() {
        let n = net(1);
        let data = make_partition(&[0, 3], 4).unwrap();
        let a = Vector::from_vec(vec![0.1, 100.0, -100.0, 0.2]);
        let b = Vector::from_vec(vec![0.1, f64::NAN, 7.0, 0.2]);
        assert_eq!(amortized_infer(&n, &a, &data).unwrap(), amortized_infer(&n, &b, &data).unwrap());
        let x = n.fill_input(&b, &data).unwrap();
        assert_eq!(x.as_slice(), &[0.1, -0.25, 1.0, 0.2]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let n = net(1);
        let data = make_partition(&[0], 3).unwrap();
        assert!(amortized_infer(&n, &Vector::zeros(3), &data).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let n = net(2);
        let input = Vector::from_vec(vec![0.3, -0.7, 0.2, 1.1]);
        let upstream = rng::standard_normal(&mut rng::seeded(3), 8);
        let act = n.forward(&input).unwrap();
        let grad = n.backward(&act, &upstream).unwrap();
        let theta = Vector::from_vec(n.params_flat());
        let fd = finite_diff_jacobian(
            |t| {
                let mut m = n.clone();
                m.set_params_flat(t.as_slice()).unwrap();
                Vector::from_element(1, m.forward(&input).unwrap().output.dot(&upstream))
            },
            &theta,
            1e-6,
        );
        for (i, g) in grad.iter().enumerate() {
            assert!((g - fd[(0, i)]).abs() < 1e-6, "param {i}");
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let n = net(4);
        let back = InferenceNetwork::from_json(&n.to_json().unwrap()).unwrap();
        assert_eq!(n, back);
        let mut doc = NetworkDocument::from(&n);
        doc.b2.pop();
        assert!(InferenceNetwork::try_from(doc).is_err());
    }
}
