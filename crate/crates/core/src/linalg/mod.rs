//! Dense and matrix-free linear algebra.
//!
//! Everything that touches a flow Jacobian goes through [`LinearOperator`]:
//! sub-blocks of `J(x)` and `G(y)` are never formed unless a caller asks for
//! a dense copy (the desk-scale oracles do).

mod dense;
mod gmres;
mod householder;
mod hutchinson;

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};

pub use dense::{
    dense_logabsdet, finite_diff_jacobian, singular_values, spectral_norm, DEFAULT_FD_EPS,
};
pub use gmres::{gmres, GmresConfig, GmresOutcome};
pub use householder::{
    householder_apply, householder_apply_transpose, householder_matrix, householder_vjp,
    ReflectorGrads,
};
pub(crate) use hutchinson::summarize;
pub use hutchinson::{
    hutchinson_trace, hutchinson_trace_grad_weight, HutchinsonProbe, TraceEstimate,
};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// A matrix-free linear map `R^cols -> R^rows` with access to its adjoint.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, v: &Vector) -> Result<Vector>;
    fn apply_adjoint(&self, w: &Vector) -> Result<Vector>;

    /// Assembles the operator column by column.
    fn to_dense(&self) -> Result<Matrix> {
        let mut m = Matrix::zeros(self.rows(), self.cols());
        let mut e = Vector::zeros(self.cols());
        for j in 0..self.cols() {
            e[j] = 1.0;
            let col = self.apply(&e)?;
            m.set_column(j, &col);
            e[j] = 0.0;
        }
        Ok(m)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn rows(&self) -> usize {
        (**self).rows()
    }
    fn cols(&self) -> usize {
        (**self).cols()
    }
    fn apply(&self, v: &Vector) -> Result<Vector> {
        (**self).apply(v)
    }
    fn apply_adjoint(&self, w: &Vector) -> Result<Vector> {
        (**self).apply_adjoint(w)
    }
}

/// Dense matrix wrapped as an operator.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    pub matrix: Matrix,
}

impl DenseOperator {
    pub fn new(matrix: Matrix) -> Self {
        Self { matrix }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(Matrix::identity(n, n))
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.matrix.nrows()
    }
    fn cols(&self) -> usize {
        self.matrix.ncols()
    }
    fn apply(&self, v: &Vector) -> Result<Vector> {
        check_dim(self.cols(), v.len(), "dense apply")?;
        Ok(&self.matrix * v)
    }
    fn apply_adjoint(&self, w: &Vector) -> Result<Vector> {
        check_dim(self.rows(), w.len(), "dense adjoint")?;
        Ok(self.matrix.tr_mul(w))
    }
    fn to_dense(&self) -> Result<Matrix> {
        Ok(self.matrix.clone())
    }
}

/// Operator built from a pair of closures.
pub struct FnOperator<F, G> {
    rows: usize,
    cols: usize,
    forward: F,
    adjoint: G,
}

impl<F, G> FnOperator<F, G>
where
    F: Fn(&Vector) -> Result<Vector>,
    G: Fn(&Vector) -> Result<Vector>,
{
    pub fn new(rows: usize, cols: usize, forward: F, adjoint: G) -> Self {
        Self {
            rows,
            cols,
            forward,
            adjoint,
        }
    }
}

impl<F, G> LinearOperator for FnOperator<F, G>
where
    F: Fn(&Vector) -> Result<Vector>,
    G: Fn(&Vector) -> Result<Vector>,
{
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, v: &Vector) -> Result<Vector> {
        check_dim(self.cols, v.len(), "operator apply")?;
        (self.forward)(v)
    }
    fn apply_adjoint(&self, w: &Vector) -> Result<Vector> {
        check_dim(self.rows, w.len(), "operator adjoint")?;
        (self.adjoint)(w)
    }
}

/// The adjoint of an operator, as an operator.
pub struct Adjoint<O>(pub O);

impl<O: LinearOperator> LinearOperator for Adjoint<O> {
    fn rows(&self) -> usize {
        self.0.cols()
    }
    fn cols(&self) -> usize {
        self.0.rows()
    }
    fn apply(&self, v: &Vector) -> Result<Vector> {
        self.0.apply_adjoint(v)
    }
    fn apply_adjoint(&self, w: &Vector) -> Result<Vector> {
        self.0.apply(w)
    }
}

/// Counts forward and adjoint applications of the wrapped operator.
pub struct Counted<O> {
    inner: O,
    applies: AtomicUsize,
}

impl<O> Counted<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            applies: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.applies.load(Ordering::Relaxed)
    }
}

impl<O: LinearOperator> LinearOperator for Counted<O> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn apply(&self, v: &Vector) -> Result<Vector> {
        self.applies.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(v)
    }
    fn apply_adjoint(&self, w: &Vector) -> Result<Vector> {
        self.applies.fetch_add(1, Ordering::Relaxed);
        self.inner.apply_adjoint(w)
    }
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}
