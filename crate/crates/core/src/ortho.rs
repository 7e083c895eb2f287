//! Orthogonal matrices as products of Householder reflections.
//!
//! A stack of `d` nonzero vectors `b_0 … b_{d-1}` defines
//!
//! ```text
//! W = Π_i (I − 2 b_i b_iᵀ / ‖b_i‖²)
//! ```
//!
//! which is orthogonal for any choice of the vectors, so gradient updates on
//! `b_i` never leave the orthogonal group. With exactly `d` factors
//! `det(W) = (−1)^d`; only that connected component is reachable.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Vectors with a smaller norm are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// `d` Householder vectors of length `d`, stored as the rows of a `[d, d]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct HouseholderStack<T: Scalar = f64> {
    vectors: Tensor<T>,
}

impl<T: Scalar> HouseholderStack<T> {
    /// I.i.d. standard-normal vectors, redrawn while a norm is below 1e-6.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self { vectors: random_vectors(1, d, rng).reshape(&[d, d]).expect("d x d") }
    }

    pub fn from_vectors(vectors: Tensor<T>) -> Result<Self> {
        let s = vectors.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(dim_err(format!("Householder stack must be [d, d], got {s:?}")));
        }
        check_vectors(&vectors)?;
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    /// Dense `W`; intended for tests and the orthogonality metric.
    pub fn materialize(&self) -> Result<Tensor<T>> {
        let d = self.dim();
        let rows = apply_grouped(&self.vectors, &Tensor::eye(d))?;
        rows.transpose()
    }

    /// `W x` along the last axis of `x`, one reflection at a time.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        apply_grouped(&self.vectors, x)
    }
}

/// Standard-normal stacks shaped `[groups, d, d]`.
pub fn random_vectors<T: Scalar, R: Rng + ?Sized>(groups: usize, d: usize, rng: &mut R) -> Tensor<T> {
    let mut data = Vec::with_capacity(groups * d * d);
    for _ in 0..groups * d {
        loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            if v.iter().map(|x| x * x).sum::<f64>().sqrt() >= 1e-6 {
                data.extend(v.into_iter().map(T::of));
                break;
            }
        }
    }
    Tensor::new(&[groups, d, d], data).expect("consistent shape")
}

fn check_vectors<T: Scalar>(vectors: &Tensor<T>) -> Result<()> {
    let d = *vectors.shape().last().unwrap();
    for (i, b) in vectors.data().chunks(d).enumerate() {
        let n = b.iter().map(|&x| x * x).sum::<T>().sqrt().as_f64();
        if n.is_nan() || n < DEGENERATE_NORM {
            return Err(Error::DegenerateVector { index: i, norm: n });
        }
    }
    Ok(())
}

/// Validates `vectors [G, d, d]` against `x` and returns `(G, d, rows)` where
/// `x` is viewed as `[rows, G, d]`.
fn grouped_dims<T: Scalar>(vectors: &Tensor<T>, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let vs = vectors.shape();
    let (g, d) = match vs.len() {
        2 if vs[0] == vs[1] => (1, vs[0]),
        3 if vs[1] == vs[2] => (vs[0], vs[1]),
        _ => return Err(dim_err(format!("Householder vectors must be [G, d, d], got {vs:?}"))),
    };
    let xs = x.shape();
    if xs.last() != Some(&d) {
        return Err(dim_err(format!("Householder apply: last axis of {xs:?} must be {d}")));
    }
    if g > 1 && (xs.len() < 2 || xs[xs.len() - 2] != g) {
        return Err(dim_err(format!("Householder apply: {xs:?} needs a group axis of length {g}")));
    }
    Ok((g, d, x.len() / (g * d)))
}

fn reflect<T: Scalar>(y: &mut [T], b: &[T], two_over_s: T) {
    let a: T = b.iter().zip(y.iter()).map(|(&bv, &yv)| bv * yv).sum();
    let c = a * two_over_s;
    for (yv, &bv) in y.iter_mut().zip(b) {
        *yv -= c * bv;
    }
}

fn inverse_norms<T: Scalar>(vectors: &Tensor<T>, d: usize) -> Vec<T> {
    vectors
        .data()
        .chunks(d)
        .map(|b| T::of(2.0) / b.iter().map(|&x| x * x).sum::<T>())
        .collect()
}

/// Applies group `g`'s stack to `x[.., g, :]`.
pub fn apply_grouped<T: Scalar>(vectors: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (g, d, rows) = grouped_dims(vectors, x)?;
    check_vectors(vectors)?;
    let inv = inverse_norms(vectors, d);
    let vd = vectors.data();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        for gi in 0..g {
            let y = &mut out[(r * g + gi) * d..][..d];
            for i in (0..d).rev() {
                let k = gi * d + i;
                reflect(y, &vd[k * d..(k + 1) * d], inv[k]);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Backward of [`apply_grouped`] from its output `y` and upstream `dy`.
/// Inputs are recovered by re-reflecting (each factor is an involution).
fn apply_grouped_backward<T: Scalar>(vectors: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>, need_x: bool) -> (Option<Tensor<T>>, Tensor<T>) {
    let (g, d, rows) = grouped_dims(vectors, y).expect("validated in forward");
    let inv = inverse_norms(vectors, d);
    let vd = vectors.data();
    let mut db = vec![T::zero(); vectors.len()];
    let mut dx = if need_x { dy.data().to_vec() } else { Vec::new() };
    let mut xs = vec![T::zero(); d];
    let mut gs = vec![T::zero(); d];
    for r in 0..rows {
        for gi in 0..g {
            let off = (r * g + gi) * d;
            xs.copy_from_slice(&y.data()[off..off + d]);
            gs.copy_from_slice(&dy.data()[off..off + d]);
            for i in 0..d {
                let k = gi * d + i;
                let b = &vd[k * d..(k + 1) * d];
                let t = inv[k]; // 2 / s
                // reflection input x = H_i · (its output)
                reflect(&mut xs, b, t);
                let a: T = b.iter().zip(&xs).map(|(&bv, &xv)| bv * xv).sum();
                let gb: T = b.iter().zip(&gs).map(|(&bv, &gv)| bv * gv).sum();
                // db = −(2/s)(gb·x + a·dy) + (4 a gb / s²) b
                let q = t * t * a * gb;
                let dbk = &mut db[k * d..(k + 1) * d];
                for j in 0..d {
                    dbk[j] += q * b[j] - t * (gb * xs[j] + a * gs[j]);
                }
                // dx = H_i dy
                let c = t * gb;
                for (gv, &bv) in gs.iter_mut().zip(b) {
                    *gv -= c * bv;
                }
            }
            if need_x {
                dx[off..off + d].copy_from_slice(&gs);
            }
        }
    }
    let dx = need_x.then(|| Tensor::new(y.shape(), dx).expect("shape"));
    (dx, Tensor::new(vectors.shape(), db).expect("shape"))
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Householder product applied along the last axis. `vectors` is `[d, d]`
    /// (one stack) or `[G, d, d]`, in which case `self` must be `[.., G, d]`.
    pub fn householder(self, vectors: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = apply_grouped(&vectors.value(), &self.value())?;
        Ok(self.graph().push_op(
            "householder",
            out,
            &[self, vectors],
            Box::new(|args| {
                let (dx, db) = apply_grouped_backward(args.inputs[1], args.out, args.grad, args.needs[0]);
                vec![dx, Some(db)]
            }),
        ))
    }
}

/// Differentiable dense `W` from a `[d, d]` stack variable.
pub fn materialize_var<'g, T: Scalar>(vectors: Var<'g, T>) -> Result<Var<'g, T>> {
    let d = vectors.shape()[0];
    let eye = vectors.graph().constant(Tensor::eye(d));
    eye.householder(vectors)?.transpose()
}

/// `‖WᵀW − I‖_F`.
pub fn orthogonality_metric<T: Scalar>(w: &Tensor<T>) -> Result<T> {
    let s = w.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(dim_err(format!("orthogonality metric needs a square matrix, got {s:?}")));
    }
    let wtw = w.transpose()?.matmul(w)?;
    Ok(wtw.sub(&Tensor::eye(s[0]))?.norm())
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    dot / (na * nb)
}

/// Max over pairs of `|cos(W v_i, W v_j) − cos(v_i, v_j)|` for the rows of `vectors [m, d]`.
pub fn cosine_preservation_check<T: Scalar>(w: &Tensor<T>, vectors: &Tensor<T>) -> Result<T> {
    let ws = w.shape();
    let vs = vectors.shape();
    if ws.len() != 2 || ws[0] != ws[1] || vs.len() != 2 || vs[1] != ws[0] {
        return Err(dim_err(format!("cosine check needs W [d,d] and V [m,d], got {ws:?} and {vs:?}")));
    }
    let d = ws[0];
    if vectors.data().chunks(d).any(|v| v.iter().all(|&x| x == T::zero())) {
        return Err(contract("cosine check: zero vector in set"));
    }
    let mapped = vectors.matmul(&w.transpose()?)?;
    let (v, m) = (vectors.data(), mapped.data());
    let mut worst = T::zero();
    for i in 0..vs[0] {
        for j in i + 1..vs[0] {
            let before = cosine(&v[i * d..(i + 1) * d], &v[j * d..(j + 1) * d]);
            let after = cosine(&m[i * d..(i + 1) * d], &m[j * d..(j + 1) * d]);
            worst = worst.max((after - before).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn axis_reflections_compose_to_minus_identity() {
        let s = HouseholderStack::<f64>::from_vectors(Tensor::eye(2)).unwrap();
        let w = s.materialize().unwrap();
        assert_eq!(w.data(), &[-1.0, 0.0, 0.0, -1.0]);
        let s1 = HouseholderStack::<f64>::from_vectors(Tensor::ones(&[1, 1])).unwrap();
        assert_eq!(s1.materialize().unwrap().data(), &[-1.0]);
    }

    #[test]
    fn repeated_axis_reflection() {
        for d in 1..6 {
            let mut v = Tensor::<f64>::zeros(&[d, d]);
            for i in 0..d {
                v.data_mut()[i * d] = 1.0;
            }
            let s = HouseholderStack::from_vectors(v).unwrap();
            let x = Tensor::from_fn(&[d], |i| i as f64 + 1.5);
            let y = s.apply(&x).unwrap();
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(y.data()[0], sign * 1.5);
            assert_eq!(&y.data()[1..], &x.data()[1..]);
        }
    }

    #[test]
    fn degenerate_vector_rejected() {
        let mut v = Tensor::<f64>::eye(3);
        v.data_mut()[4] = 0.0;
        match HouseholderStack::from_vectors(v) {
            Err(Error::DegenerateVector { index: 1, .. }) => {}
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(orthogonality_metric(&Tensor::<f64>::eye(4)).unwrap(), 0.0);
        let m = orthogonality_metric(&Tensor::<f64>::eye(2).scale(2.0)).unwrap();
        assert!((m - 3.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(orthogonality_metric(&Tensor::<f64>::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn cosine_check_examples() {
        let v = Tensor::<f64>::new(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let neg = Tensor::<f64>::eye(2).scale(-1.0);
        assert_eq!(cosine_preservation_check(&neg, &v).unwrap(), 0.0);
        let stretch = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 10.0]).unwrap();
        assert!(cosine_preservation_check(&stretch, &v).unwrap() > 0.9);
        let z = Tensor::<f64>::new(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(cosine_preservation_check(&neg, &z).is_err());
    }

    #[test]
    fn grouped_apply_matches_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vecs: Tensor<f64> = random_vectors(3, 4, &mut rng);
        let x = Tensor::randn(&[5, 3, 4], 1.0, &mut rng);
        let y = apply_grouped(&vecs, &x).unwrap();
        for gi in 0..3 {
            let stack = HouseholderStack::from_vectors(
                Tensor::new(&[4, 4], vecs.data()[gi * 16..(gi + 1) * 16].to_vec()).unwrap(),
            )
            .unwrap();
            let w = stack.materialize().unwrap();
            for r in 0..5 {
                let xv = Tensor::new(&[4, 1], x.data()[(r * 3 + gi) * 4..][..4].to_vec()).unwrap();
                let expect = w.matmul(&xv).unwrap();
                for j in 0..4 {
                    assert!((expect.data()[j] - y.data()[(r * 3 + gi) * 4 + j]).abs() < 1e-12);
                }
            }
        }
    }
}
