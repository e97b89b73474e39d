use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::partition::{make_partition, Partition};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    GaussMixture,
    CorrelatedGauss,
    TinyDigits,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::GaussMixture => "gauss_mixture",
            DatasetKind::CorrelatedGauss => "correlated_gauss",
            DatasetKind::TinyDigits => "tiny_digits",
        }
    }
}

pub const TINY_DIGITS_SIDE: usize = 6;
pub const TINY_DIGITS_DIM: usize = TINY_DIGITS_SIDE * TINY_DIGITS_SIDE;

#[rustfmt::skip]
const GLYPHS: [[&str; 6]; 10] = [
    [".####.", "#....#", "#....#", "#....#", "#....#", ".####."],
    ["..##..", ".###..", "..##..", "..##..", "..##..", ".####."],
    [".####.", "#....#", "....#.", "..##..", ".#....", "######"],
    ["#####.", ".....#", "..###.", ".....#", ".....#", "#####."],
    ["#...#.", "#...#.", "######", "....#.", "....#.", "....#."],
    ["######", "#.....", "#####.", ".....#", "#....#", ".####."],
    [".####.", "#.....", "#####.", "#....#", "#....#", ".####."],
    ["######", "....#.", "...#..", "..#...", "..#...", "..#..."],
    [".####.", "#....#", ".####.", "#....#", "#....#", ".####."],
    [".####.", "#....#", ".#####", ".....#", "....#.", ".###.."],
];

/// Noise-free 6×6 rendering of `digit`, row-major, ink = 1.
pub fn digit_glyph(digit: usize) -> Vector {
    let rows = GLYPHS[digit % 10];
    Vector::from_iterator(
        TINY_DIGITS_DIM,
        rows.iter().flat_map(|r| r.bytes().map(|b| if b == b'#' { 1.0 } else { 0.0 })),
    )
}

/// Generator parameters; fields a kind does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    /// Gaussian noise std (two_moons, tiny_digits).
    pub noise: f64,
    /// Correlation of the AR(1) covariance `Σ_ij = ρ^|i−j|` (correlated_gauss).
    pub rho: f64,
    /// Explicit covariance, overriding `rho` (correlated_gauss).
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Component means (gauss_mixture); defaults to three points on a circle.
    pub means: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<f64>>,
    pub component_std: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            noise: 0.1,
            rho: 0.8,
            covariance: None,
            means: None,
            weights: None,
            component_std: 0.5,
        }
    }
}

impl DatasetParams {
    /// Covariance used by correlated_gauss.
    pub fn covariance_matrix(&self, d: usize) -> Result<Matrix> {
        let m = match &self.covariance {
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidParams(format!("covariance must be {d}x{d}")));
                }
                Matrix::from_fn(d, d, |i, j| rows[i][j])
            }
            None => {
                if !(self.rho.abs() < 1.0) {
                    return Err(Error::InvalidParams("rho must lie in (-1, 1)".into()));
                }
                Matrix::from_fn(d, d, |i, j| self.rho.powi(i.abs_diff(j) as i32))
            }
        };
        if (&m - m.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidParams("covariance must be symmetric".into()));
        }
        Ok(m)
    }

    fn mixture(&self, d: usize) -> Result<(Vec<Vector>, Vec<f64>)> {
        let means: Vec<Vector> = match &self.means {
            Some(ms) => {
                if ms.is_empty() || ms.iter().any(|m| m.len() != d) {
                    return Err(Error::InvalidParams(format!("mixture means must be non-empty with length {d}")));
                }
                ms.iter().map(|m| Vector::from_vec(m.clone())).collect()
            }
            None => (0..3)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                    let mut m = Vector::zeros(d);
                    m[0] = 2.0 * t.cos();
                    if d > 1 {
                        m[1] = 2.0 * t.sin();
                    }
                    m
                })
                .collect(),
        };
        let weights = self
            .weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / means.len() as f64; means.len()]);
        if weights.len() != means.len() {
            return Err(Error::InvalidParams("one weight per mixture component".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams("mixture weights must be non-negative and sum to 1".into()));
        }
        if !(self.component_std > 0.0) {
            return Err(Error::InvalidParams("component_std must be positive".into()));
        }
        Ok((means, weights))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub samples: Vec<Vector>,
    /// Per-sample observed flags (`true` = observed). Hidden entries keep
    /// their true values so imputation error can be measured.
    pub masks: Option<Vec<Vec<bool>>>,
    pub seed: u64,
}

/// Draws a reproducible synthetic dataset.
pub fn gen_dataset(kind: DatasetKind, n: usize, d: usize, seed: u64, params: &DatasetParams) -> Result<Dataset> {
    let mut g = rng::seeded(seed);
    if !(params.noise >= 0.0) {
        return Err(Error::InvalidParams("noise must be non-negative".into()));
    }
    let samples = match kind {
        DatasetKind::TwoMoons => {
            if d != 2 {
                return Err(Error::InvalidParams("two_moons is 2-dimensional".into()));
            }
            (0..n)
                .map(|_| {
                    let t = std::f64::consts::PI * g.random::<f64>();
                    let upper = g.random::<bool>();
                    let (a, b) = if upper {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let e = rng::standard_normal(&mut g, 2) * params.noise;
                    Vector::from_vec(vec![a + e[0], b + e[1]])
                })
                .collect()
        }
        DatasetKind::GaussMixture => {
            if d == 0 {
                return Err(Error::InvalidParams("dimension must be positive".into()));
            }
            let (means, weights) = params.mixture(d)?;
            let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidParams(e.to_string()))?;
            (0..n)
                .map(|_| {
                    let k = pick.sample(&mut g);
                    &means[k] + rng::standard_normal(&mut g, d) * params.component_std
                })
                .collect()
        }
        DatasetKind::CorrelatedGauss => {
            if d == 0 {
                return Err(Error::InvalidParams("dimension must be positive".into()));
            }
            let cov = params.covariance_matrix(d)?;
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::InvalidParams("covariance must be positive definite".into()))?;
            let l = chol.l();
            (0..n).map(|_| &l * rng::standard_normal(&mut g, d)).collect()
        }
        DatasetKind::TinyDigits => {
            if d != TINY_DIGITS_DIM {
                return Err(Error::InvalidParams(format!("tiny_digits is {TINY_DIGITS_DIM}-dimensional")));
            }
            let noise = Normal::new(0.0, params.noise).map_err(|e| Error::InvalidParams(e.to_string()))?;
            (0..n)
                .map(|_| {
                    let digit = g.random_range(0..10);
                    digit_glyph(digit).map(|v| v + noise.sample(&mut g))
                })
                .collect()
        }
    };
    Ok(Dataset {
        name: kind.as_str().to_string(),
        dim: d,
        samples,
        masks: None,
        seed,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Hides each coordinate independently with probability `rate`; a sample
    /// that would lose every coordinate keeps one at random.
    pub fn with_missingness(mut self, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParams("missingness rate must lie in [0, 1)".into()));
        }
        let mut g = rng::seeded(seed);
        let masks = self
            .samples
            .iter()
            .map(|_| {
                let mut m: Vec<bool> = (0..self.dim).map(|_| g.random::<f64>() >= rate).collect();
                if !m.iter().any(|&o| o) {
                    m[g.random_range(0..self.dim)] = true;
                }
                m
            })
            .collect();
        self.masks = Some(masks);
        Ok(self)
    }

    /// Observed partition of sample `i` (all coordinates when unmasked).
    pub fn partition(&self, i: usize) -> Result<Partition> {
        let observed: Vec<usize> = match &self.masks {
            Some(m) => (0..self.dim).filter(|&j| m[i][j]).collect(),
            None => (0..self.dim).collect(),
        };
        make_partition(&observed, self.dim)
    }

    pub fn is_complete(&self, i: usize) -> bool {
        self.masks.as_ref().is_none_or(|m| m[i].iter().all(|&o| o))
    }

    /// Per-coordinate median over observed entries (0 when none).
    pub fn medians(&self) -> Vector {
        Vector::from_fn(self.dim, |j, _| {
            let mut col: Vec<f64> = self
                .samples
                .iter()
                .enumerate()
                .filter(|(i, _)| self.masks.as_ref().is_none_or(|m| m[*i][j]))
                .map(|(_, s)| s[j])
                .collect();
            if col.is_empty() {
                return 0.0;
            }
            col.sort_by(f64::total_cmp);
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
    }

    pub fn sample_covariance(&self) -> Matrix {
        let n = self.len() as f64;
        let mean = self.samples.iter().fold(Vector::zeros(self.dim), |a, s| a + s) / n;
        let mut cov = Matrix::zeros(self.dim, self.dim);
        for s in &self.samples {
            let c = s - &mean;
            cov.ger(1.0 / (n - 1.0), &c, &c, 1.0);
        }
        cov
    }

    /// Splits off the last `n_test` samples.
    pub fn split(&self, n_test: usize) -> (Dataset, Dataset) {
        let cut = self.len().saturating_sub(n_test);
        let part = |range: std::ops::Range<usize>| Dataset {
            name: self.name.clone(),
            dim: self.dim,
            samples: self.samples[range.clone()].to_vec(),
            masks: self.masks.as_ref().map(|m| m[range].to_vec()),
            seed: self.seed,
        };
        (part(0..cut), part(cut..self.len()))
    }

    /// Seeded permutation of sample indices.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::seeded(seed));
        idx
    }

    /// CSV with columns `y0..`, followed by `m0..` (1 = observed) when masked.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("y{j}")).collect();
        if self.masks.is_some() {
            header.extend((0..self.dim).map(|j| format!("m{j}")));
        }
        w.write_record(&header)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            if let Some(m) = &self.masks {
                row.extend(m[i].iter().map(|&o| if o { "1" } else { "0" }.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, name: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let dim = header.iter().filter(|h| h.starts_with('y')).count();
        let masked = header.len() == 2 * dim;
        for (j, h) in header.iter().enumerate() {
            let expect = if j < dim { format!("y{j}") } else { format!("m{}", j - dim) };
            if h != expect || (!masked && j >= dim) {
                return Err(Error::Format(format!("unexpected dataset column {h:?}, expected {expect:?}")));
            }
        }
        if dim == 0 {
            return Err(Error::Format("dataset has no y columns".into()));
        }
        let mut samples = Vec::new();
        let mut masks = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
            let y = (0..dim).map(|j| parse(&rec[j])).collect::<Result<Vec<_>>>()?;
            samples.push(Vector::from_vec(y));
            if masked {
                let m = (dim..2 * dim)
                    .map(|j| match rec[j].trim() {
                        "1" => Ok(true),
                        "0" => Ok(false),
                        other => Err(Error::Format(format!("mask entries must be 0 or 1, got {other:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if !m.iter().any(|&o| o) {
                    return Err(Error::Format(format!("row {} hides every coordinate", samples.len())));
                }
                masks.push(m);
            }
        }
        Ok(Dataset {
            name: name.to_string(),
            dim,
            samples,
            masks: masked.then_some(masks),
            seed: 0,
        })
    }
}
