//! Observed/hidden index partitions and masked Jacobian views.
//!
//! Latent-space indices carry an `x` subscript in comments, data-space ones a
//! `y`. `J^{OO}` has rows `O_y` and columns `O_x`; `G^{HH}` has rows `H_x` and
//! columns `H_y`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flows::{Flow, Linearization};
use crate::linalg::{
    dense_logabsdet, gmres, Adjoint, Counted, GmresConfig, LinearOperator, Matrix, Vector,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PartitionDocument", into = "PartitionDocument")]
pub struct Partition {
    observed: Vec<usize>,
    hidden: Vec<usize>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct PartitionDocument {
    dim: usize,
    observed: Vec<usize>,
}

impl TryFrom<PartitionDocument> for Partition {
    type Error = Error;
    fn try_from(doc: PartitionDocument) -> Result<Self> {
        make_partition(&doc.observed, doc.dim)
    }
}

impl From<Partition> for PartitionDocument {
    fn from(p: Partition) -> Self {
        Self {
            dim: p.dim,
            observed: p.observed,
        }
    }
}

/// Canonical partition with sorted `observed` and its complement as `hidden`.
pub fn make_partition(observed: &[usize], dim: usize) -> Result<Partition> {
    let mut seen = vec![false; dim];
    for &i in observed {
        if i >= dim {
            return Err(Error::InvalidIndices(format!("index {i} outside 0..{dim}")));
        }
        if seen[i] {
            return Err(Error::InvalidIndices(format!("index {i} repeated")));
        }
        seen[i] = true;
    }
    if observed.is_empty() {
        return Err(Error::InvalidIndices("no observed indices".into()));
    }
    if observed.len() == dim {
        return Err(Error::InvalidIndices("no hidden indices".into()));
    }
    let observed: Vec<usize> = (0..dim).filter(|&i| seen[i]).collect();
    let hidden = (0..dim).filter(|&i| !seen[i]).collect();
    Ok(Partition {
        observed,
        hidden,
        dim,
    })
}

pub fn gather(x: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| x[i]))
}

/// Places `v` at `idx` in a zero vector of length `dim`.
pub fn scatter(v: &Vector, idx: &[usize], dim: usize) -> Vector {
    let mut out = Vector::zeros(dim);
    for (k, &i) in idx.iter().enumerate() {
        out[i] = v[k];
    }
    out
}

impl Partition {
    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn d_observed(&self) -> usize {
        self.observed.len()
    }

    pub fn d_hidden(&self) -> usize {
        self.hidden.len()
    }

    /// `true` at observed coordinates.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.dim];
        for &i in &self.observed {
            m[i] = true;
        }
        m
    }

    pub fn gather_observed(&self, x: &Vector) -> Vector {
        gather(x, &self.observed)
    }

    pub fn gather_hidden(&self, x: &Vector) -> Vector {
        gather(x, &self.hidden)
    }

    /// Reassembles a full vector from its two parts.
    pub fn join(&self, observed: &Vector, hidden: &Vector) -> Result<Vector> {
        check_dim(self.d_observed(), observed.len(), "observed part")?;
        check_dim(self.d_hidden(), hidden.len(), "hidden part")?;
        let mut out = Vector::zeros(self.dim);
        for (k, &i) in self.observed.iter().enumerate() {
            out[i] = observed[k];
        }
        for (k, &i) in self.hidden.iter().enumerate() {
            out[i] = hidden[k];
        }
        Ok(out)
    }
}

/// Latent and data partitions with matching block sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPair {
    pub latent: Partition,
    pub data: Partition,
}

impl PartitionPair {
    pub fn new(latent: Partition, data: Partition) -> Result<Self> {
        check_dim(data.dim(), latent.dim(), "latent partition dimension")?;
        check_dim(data.d_observed(), latent.d_observed(), "latent observed count")?;
        Ok(Self { latent, data })
    }

    /// Same indices in both spaces.
    pub fn aligned(data: Partition) -> Self {
        Self {
            latent: data.clone(),
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Blocks of `J(x)`, rows in data space.
    Forward,
    /// Blocks of `G(f(x)) = J(x)⁻¹`, rows in latent space.
    Inverse,
}

/// `gather_rows ∘ M ∘ scatter_cols` for `M = J(x)` or `G(f(x))`.
pub struct SubJacobian<'l, 'f> {
    lin: &'l Linearization<'f>,
    rows: &'l [usize],
    cols: &'l [usize],
    direction: Direction,
}

pub fn sub_jacobian<'l, 'f>(
    lin: &'l Linearization<'f>,
    rows: &'l [usize],
    cols: &'l [usize],
    direction: Direction,
) -> SubJacobian<'l, 'f> {
    SubJacobian {
        lin,
        rows,
        cols,
        direction,
    }
}

impl LinearOperator for SubJacobian<'_, '_> {
    fn rows(&self) -> usize {
        self.rows.len()
    }

    fn cols(&self) -> usize {
        self.cols.len()
    }

    fn apply(&self, v: &Vector) -> Result<Vector> {
        check_dim(self.cols.len(), v.len(), "sub-Jacobian apply")?;
        let full = scatter(v, self.cols, self.lin.dim());
        let out = match self.direction {
            Direction::Forward => self.lin.jvp(&full)?,
            Direction::Inverse => self.lin.inv_jvp(&full)?,
        };
        Ok(gather(&out, self.rows))
    }

    fn apply_adjoint(&self, w: &Vector) -> Result<Vector> {
        check_dim(self.rows.len(), w.len(), "sub-Jacobian adjoint")?;
        let full = scatter(w, self.rows, self.lin.dim());
        let out = match self.direction {
            Direction::Forward => self.lin.vjp(&full)?,
            Direction::Inverse => self.lin.inv_vjp(&full)?,
        };
        Ok(gather(&out, self.cols))
    }
}

/// How `(J^{OO})⁻¹` (and its transpose) is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseStrategy {
    /// GMRES on the `J^{OO}` view.
    DirectGmres,
    /// GMRES on `J^{OO}` left-preconditioned with `G^{OO}`.
    #[default]
    Preconditioned,
    /// `G^{OO} − G^{OH}(G^{HH})⁻¹G^{HO}` with the inner solve by GMRES.
    Schur,
}

/// Result of a `J^{OO}` solve.
#[derive(Debug, Clone)]
pub struct BlockSolve {
    pub x: Vector,
    /// Total GMRES iterations, inner ones included.
    pub iterations: usize,
    /// Sub-Jacobian operator applications, forward and adjoint.
    pub applications: usize,
}

fn singular(e: Error) -> Error {
    match e {
        Error::SingularMatrix { pivot } => {
            Error::SingularSubJacobian(format!("GMRES breakdown with residual {pivot:.3e}"))
        }
        other => other,
    }
}

/// The block structure of `J(x)` and `G(f(x))` under a partition pair.
pub struct PartitionedJacobian<'f> {
    lin: Linearization<'f>,
    pair: PartitionPair,
}

impl<'f> PartitionedJacobian<'f> {
    pub fn new(flow: &'f Flow, x: &Vector, pair: &PartitionPair) -> Result<Self> {
        check_dim(flow.dim(), pair.dim(), "partition dimension")?;
        Ok(Self {
            lin: flow.linearize(x)?,
            pair: pair.clone(),
        })
    }

    pub fn from_linearization(lin: Linearization<'f>, pair: &PartitionPair) -> Self {
        Self {
            lin,
            pair: pair.clone(),
        }
    }

    pub fn linearization(&self) -> &Linearization<'f> {
        &self.lin
    }

    pub fn pair(&self) -> &PartitionPair {
        &self.pair
    }

    fn o_x(&self) -> &[usize] {
        self.pair.latent.observed()
    }
    fn h_x(&self) -> &[usize] {
        self.pair.latent.hidden()
    }
    fn o_y(&self) -> &[usize] {
        self.pair.data.observed()
    }
    fn h_y(&self) -> &[usize] {
        self.pair.data.hidden()
    }

    pub fn j_oo(&self) -> SubJacobian<'_, 'f> {
        sub_jacobian(&self.lin, self.o_y(), self.o_x(), Direction::Forward)
    }
    pub fn j_oh(&self) -> SubJacobian<'_, 'f> {
        sub_jacobian(&self.lin, self.o_y(), self.h_x(), Direction::Forward)
    }
    pub fn j_ho(&self) -> SubJacobian<'_, 'f> {
        sub_jacobian(&self.lin, self.h_y(), self.o_x(), Direction::Forward)
    }
    pub fn j_hh(&self) -> SubJacobian<'_, 'f> {
        sub_jacobian(&self.lin, self.h_y(), self.h_x(), Direction::Forward)
    }
    pub fn g_oo(&self) -> SubJacobian<'_, 'f> {
        sub_jacobian(&self.lin, self.o_x(), self.o_y(), Direction::Inverse)
    }
    pub fn g_oh(&self) -> SubJacobian<'_, 'f> {
        sub_jacobian(&self.lin, self.o_x(), self.h_y(), Direction::Inverse)
    }
    pub fn g_ho(&self) -> SubJacobian<'_, 'f> {
        sub_jacobian(&self.lin, self.h_x(), self.o_y(), Direction::Inverse)
    }
    pub fn g_hh(&self) -> SubJacobian<'_, 'f> {
        sub_jacobian(&self.lin, self.h_x(), self.h_y(), Direction::Inverse)
    }

    /// `(J^{OO})⁻¹ r`.
    pub fn solve_oo(&self, rhs: &Vector, strategy: InverseStrategy, cfg: &GmresConfig) -> Result<BlockSolve> {
        self.solve(rhs, strategy, cfg, false)
    }

    /// `(J^{OO})⁻ᵀ r`.
    pub fn solve_oo_adjoint(
        &self,
        rhs: &Vector,
        strategy: InverseStrategy,
        cfg: &GmresConfig,
    ) -> Result<BlockSolve> {
        self.solve(rhs, strategy, cfg, true)
    }

    fn solve(&self, rhs: &Vector, strategy: InverseStrategy, cfg: &GmresConfig, adjoint: bool) -> Result<BlockSolve> {
        check_dim(self.pair.data.d_observed(), rhs.len(), "J^OO right-hand side")?;
        let j = Counted::new(self.j_oo());
        let g = Counted::new(self.g_oo());
        let (x, iterations, inner) = match strategy {
            InverseStrategy::DirectGmres | InverseStrategy::Preconditioned => {
                let pre = (strategy == InverseStrategy::Preconditioned).then_some(&g);
                let out = if adjoint {
                    let pre = pre.map(Adjoint);
                    gmres(&Adjoint(&j), rhs, cfg, pre.as_ref().map(|p| p as &dyn LinearOperator), None)
                } else {
                    gmres(&j, rhs, cfg, pre.map(|p| p as &dyn LinearOperator), None)
                }
                .map_err(singular)?;
                (out.x, out.iterations, 0)
            }
            InverseStrategy::Schur => {
                let ghh = Counted::new(self.g_hh());
                let (g_ho, g_oh) = (Counted::new(self.g_ho()), Counted::new(self.g_oh()));
                let x = if adjoint {
                    let inner_rhs = g_oh.apply_adjoint(rhs)?;
                    let inner = gmres(&Adjoint(&ghh), &inner_rhs, cfg, None, None).map_err(singular)?;
                    let x = g.apply_adjoint(rhs)? - g_ho.apply_adjoint(&inner.x)?;
                    (x, inner.iterations)
                } else {
                    let inner_rhs = g_ho.apply(rhs)?;
                    let inner = gmres(&ghh, &inner_rhs, cfg, None, None).map_err(singular)?;
                    let x = g.apply(rhs)? - g_oh.apply(&inner.x)?;
                    (x, inner.iterations)
                };
                (x.0, x.1, ghh.count() + g_ho.count() + g_oh.count())
            }
        };
        Ok(BlockSolve {
            x,
            iterations,
            applications: j.count() + g.count() + inner,
        })
    }

    /// Dense `J` and `G` sub-blocks for the oracles.
    pub fn dense(&self) -> Result<DenseBlocks> {
        let j = self.lin.jacobian();
        let g = j
            .clone()
            .try_inverse()
            .ok_or(Error::SingularMatrix { pivot: 0.0 })?;
        let pick = |m: &Matrix, r: &[usize], c: &[usize]| {
            Matrix::from_fn(r.len(), c.len(), |i, k| m[(r[i], c[k])])
        };
        Ok(DenseBlocks {
            j_oo: pick(&j, self.o_y(), self.o_x()),
            j_oh: pick(&j, self.o_y(), self.h_x()),
            j_ho: pick(&j, self.h_y(), self.o_x()),
            j_hh: pick(&j, self.h_y(), self.h_x()),
            g_oo: pick(&g, self.o_x(), self.o_y()),
            g_oh: pick(&g, self.o_x(), self.h_y()),
            g_ho: pick(&g, self.h_x(), self.o_y()),
            g_hh: pick(&g, self.h_x(), self.h_y()),
            j,
            g,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlocks {
    pub j: Matrix,
    pub g: Matrix,
    pub j_oo: Matrix,
    pub j_oh: Matrix,
    pub j_ho: Matrix,
    pub j_hh: Matrix,
    pub g_oo: Matrix,
    pub g_oh: Matrix,
    pub g_ho: Matrix,
    pub g_hh: Matrix,
}

/// `log|det J^{OO}|` for data rows `rows` and latent columns `cols` of a dense `J`.
pub fn block_score(j: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
    let sub = Matrix::from_fn(rows.len(), cols.len(), |i, k| j[(rows[i], cols[k])]);
    dense_logabsdet(&sub).unwrap_or(f64::NEG_INFINITY)
}

/// Greedy single-swap ascent on `log|det J^{OO}(x)|` over latent partitions.
///
/// Starts from the latent partition aligned with `data`; each round applies
/// the best improving swap of one observed and one hidden latent index, for
/// at most `budget` rounds.
pub fn select_latent_partition(flow: &Flow, x: &Vector, data: &Partition, budget: usize) -> Result<Partition> {
    check_dim(flow.dim(), data.dim(), "data partition dimension")?;
    let j = flow.linearize(x)?.jacobian();
    let rows = data.observed();
    let mut current = data.clone();
    let mut score = block_score(&j, rows, current.observed());
    for _ in 0..budget {
        let mut best: Option<(f64, Partition)> = None;
        for &o in current.observed() {
            for &h in current.hidden() {
                let cols: Vec<usize> = current
                    .observed()
                    .iter()
                    .map(|&i| if i == o { h } else { i })
                    .collect();
                let cand = make_partition(&cols, data.dim())?;
                let s = block_score(&j, rows, cand.observed());
                if s > score + 1e-12 && best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, cand));
                }
            }
        }
        match best {
            Some((s, p)) => {
                score = s;
                current = p;
            }
            None => break,
        }
    }
    Ok(current)
}
