//! Products of Householder reflections `H_i = I − 2 v_i v_iᵀ / ‖v_i‖²`.
//!
//! `householder_apply` computes `(H_1 H_2 ⋯ H_n) x`, so `H_n` acts first.

use super::{Matrix, Vector};
use crate::error::{check_dim, Error, Result};

const MIN_REFLECTOR_NORM: f64 = 1e-12;

fn reflect(v: &Vector, x: &mut Vector, index: usize) -> Result<()> {
    check_dim(x.len(), v.len(), "householder reflector length")?;
    let vv = v.norm_squared();
    if vv.sqrt() < MIN_REFLECTOR_NORM {
        return Err(Error::ZeroReflector {
            index,
            norm: vv.sqrt(),
        });
    }
    let coef = 2.0 * v.dot(x) / vv;
    x.axpy(-coef, v, 1.0);
    Ok(())
}

pub fn householder_apply(reflectors: &[Vector], x: &Vector) -> Result<Vector> {
    let mut out = x.clone();
    for (i, v) in reflectors.iter().enumerate().rev() {
        reflect(v, &mut out, i)?;
    }
    Ok(out)
}

/// `(H_1 ⋯ H_n)ᵀ x = H_n ⋯ H_1 x`; inverts [`householder_apply`].
pub fn householder_apply_transpose(reflectors: &[Vector], x: &Vector) -> Result<Vector> {
    let mut out = x.clone();
    for (i, v) in reflectors.iter().enumerate() {
        reflect(v, &mut out, i)?;
    }
    Ok(out)
}

pub fn householder_matrix(reflectors: &[Vector], dim: usize) -> Result<Matrix> {
    let mut m = Matrix::identity(dim, dim);
    for j in 0..dim {
        let col = householder_apply(reflectors, &m.column(j).clone_owned())?;
        m.set_column(j, &col);
    }
    Ok(m)
}

/// Gradients of `⟨upstream, (∏H_i) s⟩` with respect to `s` and every `v_i`.
#[derive(Debug, Clone)]
pub struct ReflectorGrads {
    pub input: Vector,
    pub reflectors: Vec<Vector>,
}

pub fn householder_vjp(reflectors: &[Vector], s: &Vector, upstream: &Vector) -> Result<ReflectorGrads> {
    let n = reflectors.len();
    // inputs[i] is the vector entering reflector i (H_n acts first).
    let mut inputs = vec![Vector::zeros(0); n];
    let mut cur = s.clone();
    for i in (0..n).rev() {
        inputs[i] = cur.clone();
        reflect(&reflectors[i], &mut cur, i)?;
    }
    let mut g = upstream.clone();
    let mut grads = vec![Vector::zeros(s.len()); n];
    for i in 0..n {
        let v = &reflectors[i];
        let w = &inputs[i];
        let vv = v.norm_squared();
        let vw = v.dot(w);
        let gv = g.dot(v);
        // out = w − 2 v (vᵀw)/(vᵀv)
        let mut gr = w * (-2.0 * gv / vv);
        gr.axpy(-2.0 * vw / vv, &g, 1.0);
        gr.axpy(4.0 * vw * gv / (vv * vv), v, 1.0);
        grads[i] = gr;
        // Reflections are symmetric: the cotangent passes through H_i itself.
        reflect(v, &mut g, i)?;
    }
    Ok(ReflectorGrads {
        input: g,
        reflectors: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::finite_diff_jacobian;
    use crate::rng;

    #[test]
    fn empty_product_is_identity() {
        let x = Vector::from_vec(vec![1.0, -2.0, 3.5]);
        assert_eq!(householder_apply(&[], &x).unwrap(), x);
    }

    #[test]
    fn single_axis_reflection() {
        let v = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let out = householder_apply(&[v], &x).unwrap();
        assert_eq!(out, Vector::from_vec(vec![-1.0, 2.0, 3.0]));
    }

    #[test]
    fn many_reflectors_stay_orthogonal() {
        let mut g = rng::seeded(21);
        let refl: Vec<Vector> = (0..50).map(|_| rng::standard_normal(&mut g, 16)).collect();
        let x = rng::standard_normal(&mut g, 16);
        let out = householder_apply(&refl, &x).unwrap();
        assert!((out.norm() - x.norm()).abs() < 1e-10);
        let q = householder_matrix(&refl, 16).unwrap();
        let err = (q.transpose() * &q - Matrix::identity(16, 16)).amax();
        assert!(err < 1e-9);
        let back = householder_apply_transpose(&refl, &out).unwrap();
        assert!((back - x).amax() < 1e-10);
    }

    #[test]
    fn zero_reflector_rejected() {
        let res = householder_apply(&[Vector::zeros(3)], &Vector::zeros(3));
        assert!(matches!(res, Err(Error::ZeroReflector { index: 0, .. })));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut g = rng::seeded(5);
        let refl: Vec<Vector> = (0..3).map(|_| rng::standard_normal(&mut g, 4)).collect();
        let s = rng::standard_normal(&mut g, 4);
        let up = rng::standard_normal(&mut g, 4);
        let grads = householder_vjp(&refl, &s, &up).unwrap();

        let ds = finite_diff_jacobian(
            |p| Vector::from_element(1, up.dot(&householder_apply(&refl, p).unwrap())),
            &s,
            1e-6,
        );
        assert!((ds.row(0).transpose() - &grads.input).amax() < 1e-7);

        for k in 0..refl.len() {
            let dv = finite_diff_jacobian(
                |p| {
                    let mut r = refl.clone();
                    r[k] = p.clone();
                    Vector::from_element(1, up.dot(&householder_apply(&r, &s).unwrap()))
                },
                &refl[k],
                1e-6,
            );
            assert!((dv.row(0).transpose() - &grads.reflectors[k]).amax() < 1e-7);
        }
    }
}
