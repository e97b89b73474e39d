use super::layer::jacobian_from_slope;
use super::Flow;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{dense_logabsdet, inf_norm, Matrix, Vector};

const MAX_NEUMANN_TERMS: usize = 10_000;
const DIVERGENCE_RUN: usize = 10;

/// A forward pass recorded at one latent point.
///
/// `points[l]` is the input of block `l` (`points[L]` is `y = f(x)`),
/// `pre[l]` its pre-activation and `slope[l]` the activation slopes there.
/// The Jacobian is `J = A_L ⋯ A_1` with `A_l = I + W2 diag(slope_l) W1`.
#[derive(Debug, Clone)]
pub struct Linearization<'a> {
    pub(crate) flow: &'a Flow,
    pub(crate) points: Vec<Vector>,
    pub(crate) pre: Vec<Vector>,
    pub(crate) slope: Vec<Vector>,
}

impl<'a> Linearization<'a> {
    pub(crate) fn new(flow: &'a Flow, x: &Vector) -> Result<Self> {
        check_dim(flow.dim(), x.len(), "linearization point")?;
        let n = flow.layers().len();
        let mut points = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        let mut slope = Vec::with_capacity(n);
        let mut cur = x.clone();
        for layer in flow.layers() {
            let z = layer.pre_activation(&cur);
            let act = z.map(|v| layer.activation.value(v));
            let next = &cur + &layer.w2 * act + &layer.b2;
            slope.push(z.map(|v| layer.activation.slope(v)));
            pre.push(z);
            points.push(cur);
            cur = next;
        }
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow forward"));
        }
        points.push(cur);
        Ok(Self {
            flow,
            points,
            pre,
            slope,
        })
    }

    pub fn flow(&self) -> &'a Flow {
        self.flow
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// Latent point `x`.
    pub fn point(&self) -> &Vector {
        &self.points[0]
    }

    /// Data point `y = f(x)`.
    pub fn output(&self) -> &Vector {
        self.points.last().expect("points always holds the input")
    }

    fn layer_jvp(&self, l: usize, v: &Vector) -> Vector {
        let layer = &self.flow.layers()[l];
        let hidden = (&layer.w1 * v).component_mul(&self.slope[l]);
        v + &layer.w2 * hidden
    }

    fn layer_vjp(&self, l: usize, u: &Vector) -> Vector {
        let layer = &self.flow.layers()[l];
        let hidden = layer.w2.tr_mul(u).component_mul(&self.slope[l]);
        u + layer.w1.tr_mul(&hidden)
    }

    /// Residual-branch Jacobian `K_l = W2 diag(slope) W1` applied (or transposed).
    fn branch(&self, l: usize, v: &Vector, transpose: bool) -> Vector {
        let layer = &self.flow.layers()[l];
        if transpose {
            layer.w1.tr_mul(&layer.w2.tr_mul(v).component_mul(&self.slope[l]))
        } else {
            &layer.w2 * (&layer.w1 * v).component_mul(&self.slope[l])
        }
    }

    /// `A_l⁻¹ v = Σ_j (−K_l)^j v`, truncated once a term drops below `tol`.
    fn layer_neumann(&self, l: usize, v: &Vector, tol: f64, transpose: bool) -> Result<Vector> {
        let mut sum = v.clone();
        let mut term = v.clone();
        let mut prev = inf_norm(&term);
        let mut growing = 0;
        for j in 1..=MAX_NEUMANN_TERMS {
            term = -self.branch(l, &term, transpose);
            sum += &term;
            let size = inf_norm(&term);
            if !size.is_finite() {
                return Err(Error::SeriesDiverging { layer: l, terms: j });
            }
            if size < tol {
                return Ok(sum);
            }
            if size > prev {
                growing += 1;
                if growing >= DIVERGENCE_RUN {
                    return Err(Error::SeriesDiverging { layer: l, terms: j });
                }
            } else {
                growing = 0;
            }
            prev = size;
        }
        Err(Error::SeriesDiverging {
            layer: l,
            terms: MAX_NEUMANN_TERMS,
        })
    }

    pub fn jvp(&self, v: &Vector) -> Result<Vector> {
        check_dim(self.dim(), v.len(), "jvp tangent")?;
        let mut out = v.clone();
        for l in 0..self.pre.len() {
            out = self.layer_jvp(l, &out);
        }
        Ok(out)
    }

    pub fn vjp(&self, u: &Vector) -> Result<Vector> {
        check_dim(self.dim(), u.len(), "vjp cotangent")?;
        let mut out = u.clone();
        for l in (0..self.pre.len()).rev() {
            out = self.layer_vjp(l, &out);
        }
        Ok(out)
    }

    /// Tangents entering each block: `out[l] = A_l ⋯ A_1`-prefix applied to `v`
    /// (`out[0] = v`, `out[L] = J v`).
    pub(crate) fn jvp_trace(&self, v: &Vector) -> Vec<Vector> {
        let mut out = Vec::with_capacity(self.pre.len() + 1);
        out.push(v.clone());
        for l in 0..self.pre.len() {
            let next = self.layer_jvp(l, &out[l]);
            out.push(next);
        }
        out
    }

    /// Cotangents leaving each block: `out[l]` is `u` pulled back to the
    /// output of block `l` (`out[L-1] = u`), i.e. `(A_L ⋯ A_{l+2})ᵀ u` in 1-based terms.
    pub(crate) fn vjp_trace(&self, u: &Vector) -> Vec<Vector> {
        let n = self.pre.len();
        let mut out = vec![Vector::zeros(0); n];
        let mut cur = u.clone();
        for l in (0..n).rev() {
            out[l] = cur.clone();
            cur = self.layer_vjp(l, &cur);
        }
        out
    }

    pub fn inv_jvp(&self, v: &Vector) -> Result<Vector> {
        self.inv_jvp_with_tol(v, self.flow.tolerances.neumann)
    }

    /// `J⁻¹ v = A_1⁻¹ ⋯ A_L⁻¹ v`.
    pub fn inv_jvp_with_tol(&self, v: &Vector, tol: f64) -> Result<Vector> {
        check_dim(self.dim(), v.len(), "inverse jvp tangent")?;
        let mut out = v.clone();
        for l in (0..self.pre.len()).rev() {
            out = self.layer_neumann(l, &out, tol, false)?;
        }
        Ok(out)
    }

    pub fn inv_vjp(&self, u: &Vector) -> Result<Vector> {
        self.inv_vjp_with_tol(u, self.flow.tolerances.neumann)
    }

    /// `J⁻ᵀ u`, the row vector `uᵀ J⁻¹ = uᵀ G`.
    pub fn inv_vjp_with_tol(&self, u: &Vector, tol: f64) -> Result<Vector> {
        check_dim(self.dim(), u.len(), "inverse vjp cotangent")?;
        let mut out = u.clone();
        for l in 0..self.pre.len() {
            out = self.layer_neumann(l, &out, tol, true)?;
        }
        Ok(out)
    }

    pub fn layer_jacobian(&self, l: usize) -> Matrix {
        jacobian_from_slope(&self.flow.layers()[l], &self.slope[l])
    }

    /// Dense `J(x)`.
    pub fn jacobian(&self) -> Matrix {
        let d = self.dim();
        let mut j = Matrix::identity(d, d);
        for l in 0..self.pre.len() {
            j = self.layer_jacobian(l) * j;
        }
        j
    }

    /// Dense `G(f(x))` assembled from Neumann-series columns.
    pub fn inverse_jacobian(&self) -> Result<Matrix> {
        let d = self.dim();
        let mut g = Matrix::zeros(d, d);
        let mut e = Vector::zeros(d);
        for j in 0..d {
            e[j] = 1.0;
            g.set_column(j, &self.inv_jvp(&e)?);
            e[j] = 0.0;
        }
        Ok(g)
    }

    /// `log|det J(x)|` as a sum of per-block LU determinants.
    pub fn logabsdet(&self) -> Result<f64> {
        let mut acc = 0.0;
        for l in 0..self.pre.len() {
            acc += dense_logabsdet(&self.layer_jacobian(l))?;
        }
        Ok(acc)
    }
}
