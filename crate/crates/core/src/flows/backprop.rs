//! Reverse-mode sweeps through a recorded forward pass.
//!
//! A sweep accumulates the gradient of
//! `λᵀ f(x) + Σ_l ⟨Ā_l, A_l(x_l)⟩`
//! with respect to the latent input and (optionally) every block parameter.
//! `λ` is an output cotangent and `Ā_l` a per-block cotangent on the block
//! Jacobian `A_l`. Log-determinant gradients use dense `Ā_l`; Hutchinson
//! trace terms `wᵀ J(x) z` use rank-one `Ā_l`.

use super::{Flow, Linearization};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, Vector};

/// Cotangent on one block Jacobian.
#[derive(Debug, Clone)]
pub enum LayerSeed {
    /// `coef · left · rightᵀ`
    Rank1 {
        coef: f64,
        left: Vector,
        right: Vector,
    },
    Dense(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

/// Parameter gradient with the same layout as [`Flow::params_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub layers: Vec<LayerGrads>,
}

impl FlowGrads {
    pub fn zeros(flow: &Flow) -> Self {
        Self {
            layers: flow
                .layers()
                .iter()
                .map(|l| LayerGrads {
                    w1: Matrix::zeros(l.w1.nrows(), l.w1.ncols()),
                    b1: Vector::zeros(l.b1.len()),
                    w2: Matrix::zeros(l.w2.nrows(), l.w2.ncols()),
                    b2: Vector::zeros(l.b2.len()),
                })
                .collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &FlowGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w1 += &b.w1 * alpha;
            a.b1.axpy(alpha, &b.b1, 1.0);
            a.w2 += &b.w2 * alpha;
            a.b2.axpy(alpha, &b.b2, 1.0);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w1.as_slice());
            out.extend_from_slice(l.b1.as_slice());
            out.extend_from_slice(l.w2.as_slice());
            out.extend_from_slice(l.b2.as_slice());
        }
        out
    }
}

impl Linearization<'_> {
    pub fn empty_seeds(&self) -> Vec<Vec<LayerSeed>> {
        vec![Vec::new(); self.pre.len()]
    }

    /// Adds the per-block seeds whose sweep yields `coef · ∇ₓ[aᵀ J(x) b]`.
    pub fn push_bilinear(&self, seeds: &mut [Vec<LayerSeed>], coef: f64, a: &Vector, b: &Vector) {
        let tangents = self.jvp_trace(b);
        let cotangents = self.vjp_trace(a);
        for (l, seed) in seeds.iter_mut().enumerate() {
            seed.push(LayerSeed::Rank1 {
                coef,
                left: cotangents[l].clone(),
                right: tangents[l].clone(),
            });
        }
    }

    /// `∇ₓ[aᵀ J(x) b]` with `a`, `b` held fixed.
    pub fn bilinear_grad(&self, a: &Vector, b: &Vector) -> Result<Vector> {
        check_dim(self.dim(), a.len(), "bilinear left vector")?;
        check_dim(self.dim(), b.len(), "bilinear right vector")?;
        let mut seeds = self.empty_seeds();
        self.push_bilinear(&mut seeds, 1.0, a, b);
        Ok(self.reverse_sweep(None, &seeds, false).0)
    }

    /// Gradient of `log|det J(x)|` with respect to `x` and, if asked, the parameters.
    pub fn logabsdet_grad(&self, want_params: bool) -> Result<(Vector, Option<FlowGrads>)> {
        let mut seeds = self.empty_seeds();
        for (l, seed) in seeds.iter_mut().enumerate() {
            let inv = self
                .layer_jacobian(l)
                .try_inverse()
                .ok_or(Error::SingularMatrix { pivot: 0.0 })?;
            seed.push(LayerSeed::Dense(inv.transpose()));
        }
        Ok(self.reverse_sweep(None, &seeds, want_params))
    }

    /// Dense `J^{RC}` for data rows `R` and latent columns `C`.
    pub fn sub_jacobian(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        let j = self.jacobian();
        Matrix::from_fn(rows.len(), cols.len(), |i, k| j[(rows[i], cols[k])])
    }

    /// `log|det J^{RC}(x)|` and its gradient for a square sub-block.
    ///
    /// With `N` the inverse of the block embedded at `(C, R)`, the block
    /// Jacobian `A_l` receives `Ā_l = (C_l N B_l)ᵀ` where `B_l`, `C_l` are
    /// the products of the blocks after and before `l`.
    pub fn sub_logabsdet_grad(
        &self,
        rows: &[usize],
        cols: &[usize],
        want_params: bool,
    ) -> Result<(f64, Vector, Option<FlowGrads>)> {
        check_dim(rows.len(), cols.len(), "square sub-Jacobian")?;
        let d = self.dim();
        let n = self.pre.len();
        let blocks: Vec<Matrix> = (0..n).map(|l| self.layer_jacobian(l)).collect();
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(Matrix::identity(d, d));
        for l in 0..n {
            let next = &blocks[l] * &prefix[l];
            prefix.push(next);
        }
        let full = &prefix[n];
        let sub = Matrix::from_fn(rows.len(), cols.len(), |i, k| full[(rows[i], cols[k])]);
        let value = crate::linalg::dense_logabsdet(&sub)
            .map_err(|e| Error::SingularSubJacobian(e.to_string()))?;
        let sub_inv = sub
            .try_inverse()
            .ok_or_else(|| Error::SingularSubJacobian("block not invertible".into()))?;
        let mut embedded = Matrix::zeros(d, d);
        for (a, &c) in cols.iter().enumerate() {
            for (b, &r) in rows.iter().enumerate() {
                embedded[(c, r)] = sub_inv[(a, b)];
            }
        }
        let mut seeds = self.empty_seeds();
        let mut suffix = Matrix::identity(d, d);
        for l in (0..n).rev() {
            let m = &prefix[l] * &embedded * &suffix;
            seeds[l].push(LayerSeed::Dense(m.transpose()));
            suffix = &suffix * &blocks[l];
        }
        let (grad, params) = self.reverse_sweep(None, &seeds, want_params);
        Ok((value, grad, params))
    }

    /// Runs the reverse sweep; returns the latent gradient and optional parameter gradient.
    pub fn reverse_sweep(
        &self,
        output_adjoint: Option<&Vector>,
        seeds: &[Vec<LayerSeed>],
        want_params: bool,
    ) -> (Vector, Option<FlowGrads>) {
        let layers = self.flow.layers();
        let mut grads = want_params.then(|| FlowGrads::zeros(self.flow));
        let mut lambda = output_adjoint
            .cloned()
            .unwrap_or_else(|| Vector::zeros(self.dim()));
        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let x = &self.points[l];
            let z = &self.pre[l];
            let slope = &self.slope[l];
            let curv = z.map(|v| layer.activation.curvature(v));

            let t = layer.w2.tr_mul(&lambda).component_mul(slope);
            let mut c = Vector::zeros(layer.hidden());

            if let Some(g) = grads.as_mut() {
                let lg = &mut g.layers[l];
                let act = z.map(|v| layer.activation.value(v));
                lg.w2.ger(1.0, &lambda, &act, 1.0);
                lg.b2 += &lambda;
                lg.w1.ger(1.0, &t, x, 1.0);
                lg.b1 += &t;
            }

            for seed in seeds.get(l).map(Vec::as_slice).unwrap_or(&[]) {
                match seed {
                    LayerSeed::Rank1 { coef, left, right } => {
                        let wa = layer.w2.tr_mul(left);
                        let wb = &layer.w1 * right;
                        c += (*coef) * curv.component_mul(&wa).component_mul(&wb);
                        if let Some(g) = grads.as_mut() {
                            let lg = &mut g.layers[l];
                            lg.w2.ger(*coef, left, &slope.component_mul(&wb), 1.0);
                            lg.w1.ger(*coef, &slope.component_mul(&wa), right, 1.0);
                        }
                    }
                    LayerSeed::Dense(abar) => {
                        let p = layer.w2.tr_mul(abar);
                        for k in 0..layer.hidden() {
                            c[k] += curv[k] * p.row(k).dot(&layer.w1.row(k));
                        }
                        if let Some(g) = grads.as_mut() {
                            let lg = &mut g.layers[l];
                            let mut dw2 = abar * layer.w1.transpose();
                            for (k, mut col) in dw2.column_iter_mut().enumerate() {
                                col *= slope[k];
                            }
                            lg.w2 += dw2;
                            let mut dw1 = p;
                            for (k, mut row) in dw1.row_iter_mut().enumerate() {
                                row *= slope[k];
                            }
                            lg.w1 += dw1;
                        }
                    }
                }
            }

            if let Some(g) = grads.as_mut() {
                let lg = &mut g.layers[l];
                lg.w1.ger(1.0, &c, x, 1.0);
                lg.b1 += &c;
            }
            lambda += layer.w1.tr_mul(&(t + c));
        }
        (lambda, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowShape;
    use crate::linalg::{dense_logabsdet, finite_diff_jacobian};
    use crate::rng;

    fn flow(seed: u64, dim: usize) -> Flow {
        let shape = FlowShape {
            dim,
            layers: 3,
            hidden: 7,
            lipschitz: 0.9,
            init_scale: 2.5,
        };
        Flow::random(&shape, &mut rng::seeded(seed))
    }

    fn fd_scalar<F: Fn(&Vector) -> f64>(f: F, x: &Vector) -> Vector {
        finite_diff_jacobian(|v| Vector::from_element(1, f(v)), x, 1e-6)
            .row(0)
            .transpose()
    }

    #[test]
    fn output_adjoint_sweep_is_vjp() {
        let f = flow(1, 4);
        let mut g = rng::seeded(2);
        let x = rng::standard_normal(&mut g, 4);
        let u = rng::standard_normal(&mut g, 4);
        let lin = f.linearize(&x).unwrap();
        let (gx, _) = lin.reverse_sweep(Some(&u), &lin.empty_seeds(), false);
        assert!((gx - lin.vjp(&u).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let f = flow(3, 5);
        let mut g = rng::seeded(4);
        let x = rng::standard_normal(&mut g, 5);
        let a = rng::standard_normal(&mut g, 5);
        let b = rng::standard_normal(&mut g, 5);
        let lin = f.linearize(&x).unwrap();
        let grad = lin.bilinear_grad(&a, &b).unwrap();
        let fd = fd_scalar(|p| a.dot(&f.jvp(p, &b).unwrap()), &x);
        assert!((grad - fd).amax() < 1e-7);
    }

    #[test]
    fn logdet_gradient_matches_finite_differences() {
        let f = flow(5, 4);
        let x = rng::standard_normal(&mut rng::seeded(6), 4);
        let lin = f.linearize(&x).unwrap();
        let (grad, _) = lin.logabsdet_grad(false).unwrap();
        let fd = fd_scalar(|p| f.linearize(p).unwrap().logabsdet().unwrap(), &x);
        assert!((grad - fd).amax() < 1e-7);
    }

    #[test]
    fn sub_logdet_gradient_matches_finite_differences() {
        let f = flow(7, 5);
        let x = rng::standard_normal(&mut rng::seeded(8), 5);
        let rows = [0usize, 3];
        let cols = [1usize, 3];
        let lin = f.linearize(&x).unwrap();
        let (value, grad, _) = lin.sub_logabsdet_grad(&rows, &cols, false).unwrap();
        let dense = |p: &Vector| {
            let l = f.linearize(p).unwrap();
            dense_logabsdet(&l.sub_jacobian(&rows, &cols)).unwrap()
        };
        assert!((value - dense(&x)).abs() < 1e-12);
        let fd = fd_scalar(dense, &x);
        assert!((&grad - &fd).amax() < 1e-6 * fd.amax().max(1.0), "{grad} vs {fd}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let f = flow(9, 3);
        let mut g = rng::seeded(10);
        let x = rng::standard_normal(&mut g, 3);
        let u = rng::standard_normal(&mut g, 3);
        let a = rng::standard_normal(&mut g, 3);
        let b = rng::standard_normal(&mut g, 3);
        let rows = [0usize, 2];
        let cols = [1usize, 2];
        // objective: uᵀ f(x) + aᵀ J b + log|det J^{RC}|
        let objective = |fl: &Flow| {
            let l = fl.linearize(&x).unwrap();
            u.dot(l.output()) + a.dot(&l.jvp(&b).unwrap())
                + dense_logabsdet(&l.sub_jacobian(&rows, &cols)).unwrap()
        };
        let lin = f.linearize(&x).unwrap();
        let (_, _, Some(sub)) = lin.sub_logabsdet_grad(&rows, &cols, true).unwrap() else {
            panic!("params requested")
        };
        let mut seeds = lin.empty_seeds();
        lin.push_bilinear(&mut seeds, 1.0, &a, &b);
        let (_, Some(mut total)) = lin.reverse_sweep(Some(&u), &seeds, true) else {
            panic!("params requested")
        };
        total.axpy(1.0, &sub);
        let analytic = total.flatten();

        let p0 = f.params_flat();
        let mut probe = f.clone();
        let h = 1e-6;
        for i in (0..p0.len()).step_by(3) {
            let mut p = p0.clone();
            p[i] += h;
            probe.set_params_flat(&p).unwrap();
            let up = objective(&probe);
            p[i] -= 2.0 * h;
            probe.set_params_flat(&p).unwrap();
            let down = objective(&probe);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn full_logdet_param_gradient_matches_sub_block_with_all_indices() {
        let f = flow(11, 3);
        let x = rng::standard_normal(&mut rng::seeded(12), 3);
        let lin = f.linearize(&x).unwrap();
        let all = [0usize, 1, 2];
        let (gx, gp) = lin.logabsdet_grad(true).unwrap();
        let (_, sx, sp) = lin.sub_logabsdet_grad(&all, &all, true).unwrap();
        assert!((gx - sx).amax() < 1e-10);
        let (a, b) = (gp.unwrap().flatten(), sp.unwrap().flatten());
        let diff = a.iter().zip(&b).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff < 1e-10);
        assert!(dense_logabsdet(&lin.jacobian()).is_ok());
    }
}
