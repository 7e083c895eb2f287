//! Exact α-entmax normalization.
//!
//! For `alpha > 1` the map is
//!
//! ```text
//! p_i = [(alpha - 1) z_i - tau]_+ ^ (1 / (alpha - 1)),   sum_i p_i = 1
//! ```
//!
//! which tends to softmax as `alpha -> 1+` and equals sparsemax (Euclidean
//! projection onto the simplex) at `alpha = 2`. Sort-based closed forms are
//! used for `alpha ∈ {1.5, 2}`; every other `alpha` bisects on `tau`.
//!
//! Note: the threshold form `[(z_i - tau) / alpha]_+^(1/(alpha-1))` also
//! appears in the capsule-routing literature. It is an affine
//! reparameterization of the inputs and threshold; this module implements
//! the standard form above.

use crate::error::{contract, dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntmaxConfig {
    /// Sparsity exponent in `(1, 2]`.
    pub alpha: f64,
    /// Normalization axis; negative values count from the end.
    pub axis: isize,
    pub bisection_iters: usize,
    pub tol: f64,
}

impl Default for EntmaxConfig {
    fn default() -> Self {
        Self { alpha: 1.5, axis: -1, bisection_iters: 50, tol: 1e-9 }
    }
}

impl EntmaxConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self { alpha, ..Self::default() }
    }

    pub fn sparsemax() -> Self {
        Self::with_alpha(2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return Err(contract(format!("entmax alpha must lie in (1, 2], got {}", self.alpha)));
        }
        if self.bisection_iters == 0 {
            return Err(contract("entmax bisection_iters must be >= 1"));
        }
        Ok(())
    }

    fn resolve_axis(&self, rank: usize) -> Result<usize> {
        let ax = if self.axis < 0 { rank as isize + self.axis } else { self.axis };
        if ax < 0 || ax as usize >= rank {
            return Err(dim_err(format!("entmax axis {} invalid for rank {rank}", self.axis)));
        }
        Ok(ax as usize)
    }
}

/// Threshold `tau` for descending-sorted `z_sorted`, with default tolerances.
pub fn find_tau<T: Scalar>(z_sorted: &[T], alpha: f64) -> Result<T> {
    find_tau_with(z_sorted, &EntmaxConfig::with_alpha(alpha))
}

pub fn find_tau_with<T: Scalar>(z: &[T], cfg: &EntmaxConfig) -> Result<T> {
    cfg.validate()?;
    if z.is_empty() {
        return Err(dim_err("entmax over an empty axis"));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(contract("entmax input contains NaN or inf"));
    }
    if z.windows(2).any(|w| w[0] < w[1]) {
        return Err(contract("find_tau expects descending input"));
    }
    if cfg.alpha == 2.0 {
        Ok(sparsemax_tau(z))
    } else if cfg.alpha == 1.5 {
        Ok(entmax15_tau(z))
    } else {
        bisect_tau(z, cfg)
    }
}

/// Sorted-prefix rule: the support is the largest prefix `k` with
/// `1 + k z_k > Σ_{j<=k} z_j`; equal values enter the support together.
fn sparsemax_tau<T: Scalar>(z: &[T]) -> T {
    let mut cum = T::zero();
    let mut tau = z[0] - T::one();
    for (k, &zk) in z.iter().enumerate() {
        cum += zk;
        let kk = T::of((k + 1) as f64);
        let cand = (cum - T::one()) / kk;
        if zk > cand {
            tau = cand;
        } else {
            break;
        }
    }
    tau
}

/// Closed form for alpha = 1.5 on the scaled inputs `x = z / 2`, where
/// `p_i = [x_i - tau]_+^2`.
fn entmax15_tau<T: Scalar>(z: &[T]) -> T {
    let half = T::of(0.5);
    let (mut sum, mut sum_sq) = (T::zero(), T::zero());
    let mut tau = z[0] * half - T::one();
    for (k, &zk) in z.iter().enumerate() {
        let x = zk * half;
        sum += x;
        sum_sq += x * x;
        let kk = T::of((k + 1) as f64);
        let mean = sum / kk;
        let ss = kk * (sum_sq / kk - mean * mean);
        let delta = ((T::one() - ss) / kk).max(T::zero());
        let cand = mean - delta.sqrt();
        if cand <= x {
            tau = cand;
        } else {
            break;
        }
    }
    tau
}

fn bisect_tau<T: Scalar>(z: &[T], cfg: &EntmaxConfig) -> Result<T> {
    let am1 = T::of(cfg.alpha - 1.0);
    let inv = T::one() / am1;
    let n = T::of(z.len() as f64);
    let xmax = z[0] * am1;
    let mass = |tau: T| -> T {
        z.iter()
            .map(|&zi| {
                let t = zi * am1 - tau;
                if t > T::zero() {
                    t.powf(inv)
                } else {
                    T::zero()
                }
            })
            .sum::<T>()
    };
    let (mut lo, mut hi) = (xmax - T::one(), xmax - n.recip().powf(am1));
    let tol = T::of(cfg.tol);
    let mut mid = lo;
    let mut resid = mass(lo) - T::one();
    for _ in 0..cfg.bisection_iters {
        mid = (lo + hi) * T::of(0.5);
        resid = mass(mid) - T::one();
        if resid.abs() <= tol {
            return Ok(mid);
        }
        if resid > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if resid.abs() <= tol {
        Ok(mid)
    } else {
        Err(Error::Numeric {
            msg: format!("entmax bisection did not converge in {} iterations", cfg.bisection_iters),
            residual: resid.as_f64(),
        })
    }
}

/// Probabilities from a threshold in the module's convention.
fn probs_from_tau<T: Scalar>(z: &[T], tau: T, alpha: f64, out: &mut [T]) {
    let am1 = T::of(alpha - 1.0);
    let inv = T::one() / am1;
    for (o, &zi) in out.iter_mut().zip(z) {
        let t = zi * am1 - tau;
        *o = if t <= T::zero() {
            T::zero()
        } else if alpha == 2.0 {
            t
        } else if alpha == 1.5 {
            t * t
        } else {
            t.powf(inv)
        };
    }
}

/// Entmax of one row. `mask[i] == false` excludes entry `i` (its output is 0).
pub fn entmax_row<T: Scalar>(
    z: &[T],
    mask: Option<&[bool]>,
    cfg: &EntmaxConfig,
    out: &mut [T],
) -> Result<()> {
    let active: Vec<usize> = match mask {
        Some(m) => (0..z.len()).filter(|&i| m[i]).collect(),
        None => (0..z.len()).collect(),
    };
    if active.is_empty() {
        return Err(contract("entmax row has no unmasked entries"));
    }
    let vals: Vec<T> = active.iter().map(|&i| z[i]).collect();
    let mut sorted = vals.clone();
    if sorted.iter().any(|x| !x.is_finite()) {
        return Err(contract("entmax input contains NaN or inf"));
    }
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let tau = find_tau_with(&sorted, cfg)?;
    let mut p = vec![T::zero(); vals.len()];
    probs_from_tau(&vals, tau, cfg.alpha, &mut p);
    if cfg.alpha != 2.0 && cfg.alpha != 1.5 {
        let s: T = p.iter().copied().sum();
        for v in &mut p {
            *v /= s;
        }
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    for (&i, &pv) in active.iter().zip(&p) {
        out[i] = pv;
    }
    Ok(())
}

/// Jacobian-vector product on the support:
/// `dz = s ⊙ (g − (Σ s⊙g) / Σ s)`, `s_i = p_i^(2−α)` where `p_i > 0`.
pub fn entmax_row_backward<T: Scalar>(p: &[T], g: &[T], alpha: f64, dz: &mut [T]) {
    let e = T::of(2.0 - alpha);
    let (mut ss, mut sg) = (T::zero(), T::zero());
    for (&pv, &gv) in p.iter().zip(g) {
        if pv > T::zero() {
            let s = if alpha == 2.0 { T::one() } else { pv.powf(e) };
            ss += s;
            sg += s * gv;
        }
    }
    let mean = if ss > T::zero() { sg / ss } else { T::zero() };
    for ((d, &pv), &gv) in dz.iter_mut().zip(p).zip(g) {
        *d = if pv > T::zero() {
            let s = if alpha == 2.0 { T::one() } else { pv.powf(e) };
            s * (gv - mean)
        } else {
            T::zero()
        };
    }
}

fn along_last<T: Scalar>(
    t: &Tensor<T>,
    axis: usize,
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let r = t.rank();
    if axis == r - 1 {
        return f(t);
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.remove(axis);
    perm.push(axis);
    let moved = kernels::permute(t, &perm)?;
    let res = f(&moved)?;
    kernels::permute(&res, &kernels::inverse_perm(&perm))
}

fn forward_last<T: Scalar>(z: &Tensor<T>, mask: Option<&[bool]>, cfg: &EntmaxConfig) -> Result<Tensor<T>> {
    let n = *z.shape().last().unwrap();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(dim_err(format!("entmax mask length {} != axis length {n}", m.len())));
        }
    }
    let mut out = vec![T::zero(); z.len()];
    for (zr, or) in z.data().chunks(n).zip(out.chunks_mut(n)) {
        entmax_row(zr, mask, cfg, or)?;
    }
    Tensor::new(z.shape(), out)
}

/// α-entmax along `cfg.axis`.
pub fn entmax_forward<T: Scalar>(z: &Tensor<T>, cfg: &EntmaxConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if z.rank() == 0 {
        return Err(dim_err("entmax on a rank-0 tensor"));
    }
    let axis = cfg.resolve_axis(z.rank())?;
    along_last(z, axis, |t| forward_last(t, None, cfg))
}

/// Gradient w.r.t. the logits given the forward output `p` and upstream `grad_out`.
pub fn entmax_backward<T: Scalar>(
    p: &Tensor<T>,
    grad_out: &Tensor<T>,
    cfg: &EntmaxConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if p.shape() != grad_out.shape() {
        return Err(dim_err(format!(
            "entmax_backward shapes differ: {:?} vs {:?}",
            p.shape(),
            grad_out.shape()
        )));
    }
    let axis = cfg.resolve_axis(p.rank())?;
    let g_moved;
    let g_ref = if axis == p.rank() - 1 {
        grad_out
    } else {
        let mut perm: Vec<usize> = (0..p.rank()).collect();
        perm.remove(axis);
        perm.push(axis);
        g_moved = kernels::permute(grad_out, &perm)?;
        &g_moved
    };
    along_last(p, axis, |pm| {
        let n = *pm.shape().last().unwrap();
        let mut dz = vec![T::zero(); pm.len()];
        for ((pr, gr), dr) in pm.data().chunks(n).zip(g_ref.data().chunks(n)).zip(dz.chunks_mut(n)) {
            entmax_row_backward(pr, gr, cfg.alpha, dr);
        }
        Tensor::new(pm.shape(), dz)
    })
}

impl<'g, T: Scalar> Var<'g, T> {
    /// α-entmax over the last axis; `key_mask` (length of that axis) drops
    /// entries from every row.
    pub fn entmax(self, cfg: &EntmaxConfig, key_mask: Option<&[bool]>) -> Result<Var<'g, T>> {
        cfg.validate()?;
        if self.value().rank() == 0 {
            return Err(dim_err("entmax on a rank-0 tensor"));
        }
        let out = forward_last(&self.value(), key_mask, cfg)?;
        let alpha = cfg.alpha;
        Ok(self.graph().push_op(
            "entmax",
            out,
            &[self],
            Box::new(move |args| {
                let (p, g) = (args.out, args.grad);
                let n = *p.shape().last().unwrap();
                let mut dz = vec![T::zero(); p.len()];
                for ((pr, gr), dr) in p.data().chunks(n).zip(g.data().chunks(n)).zip(dz.chunks_mut(n)) {
                    entmax_row_backward(pr, gr, alpha, dr);
                }
                vec![Some(Tensor::from_parts(p.shape().to_vec(), dz))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(z: &[f64], alpha: f64) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        entmax_row(z, None, &EntmaxConfig::with_alpha(alpha), &mut out).unwrap();
        out
    }

    #[test]
    fn constant_input_is_uniform() {
        for alpha in [1.2, 1.5, 2.0] {
            let p = row(&[0.3, 0.3, 0.3], alpha);
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-9, "alpha {alpha}: {v}");
            }
        }
    }

    #[test]
    fn saturates_to_one_hot() {
        assert_eq!(row(&[100.0, 0.0, 0.0], 1.5), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn sparsemax_hand_example() {
        let p = row(&[1.0, 0.5, -1.0], 2.0);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12 && p[2] == 0.0);
        assert!((find_tau(&[1.0f64, 0.5, -1.0], 2.0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn single_element_gets_full_mass() {
        for alpha in [1.1, 1.5, 2.0] {
            let tau = find_tau(&[0.7], alpha).unwrap();
            assert!((tau - ((alpha - 1.0) * 0.7 - 1.0)).abs() < 1e-8, "alpha {alpha}: tau {tau}");
            assert!((row(&[0.7], alpha)[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_of_equals_splits_evenly() {
        for alpha in [1.05, 1.3, 1.5, 1.8, 2.0] {
            let p = row(&[2.5, 2.5], alpha);
            assert!((p[0] - 0.5).abs() < 1e-9 && (p[1] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_forms_agree_with_bisection() {
        let z = [0.9, 0.4, 0.1, -0.3, -1.2];
        for alpha in [1.5, 2.0] {
            let exact = row(&z, alpha);
            let mut bis = vec![0.0; z.len()];
            // nudge alpha off the closed-form branch
            let tau = bisect_tau(&z, &EntmaxConfig { bisection_iters: 200, tol: 1e-12, ..EntmaxConfig::with_alpha(alpha) });
            probs_from_tau(&z, tau.unwrap_or(f64::NAN), alpha, &mut bis);
            let s: f64 = bis.iter().sum();
            for (a, b) in exact.iter().zip(&bis) {
                assert!((a - b / s).abs() < 1e-9, "alpha {alpha}: {exact:?} vs {bis:?}");
            }
        }
    }

    #[test]
    fn sparsemax_backward_example() {
        let mut dz = [0.0; 3];
        entmax_row_backward(&[0.75, 0.25, 0.0], &[1.0, 0.0, 0.0], 2.0, &mut dz);
        assert_eq!(dz, [0.5, -0.5, 0.0]);
    }

    #[test]
    fn one_hot_has_zero_sensitivity() {
        let mut dz = [9.0; 3];
        entmax_row_backward(&[1.0, 0.0, 0.0], &[0.3, -2.0, 5.0], 1.5, &mut dz);
        assert_eq!(dz, [0.0; 3]);
    }

    #[test]
    fn uniform_with_constant_grad_is_zero() {
        let mut dz = [1.0f64; 4];
        entmax_row_backward(&[0.25; 4], &[0.7; 4], 1.5, &mut dz);
        assert!(dz.iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut out = [0.0; 2];
        assert!(entmax_row(&[f64::NAN, 1.0], None, &EntmaxConfig::default(), &mut out).is_err());
        assert!(entmax_row(&[1.0, 1.0], None, &EntmaxConfig::with_alpha(1.0), &mut out).is_err());
        assert!(entmax_row(&[1.0, 1.0], None, &EntmaxConfig::with_alpha(2.5), &mut out).is_err());
        let cfg = EntmaxConfig { bisection_iters: 0, ..EntmaxConfig::with_alpha(1.3) };
        assert!(entmax_row(&[1.0, 1.0], None, &cfg, &mut out).is_err());
    }

    #[test]
    fn nonconvergence_reports_residual() {
        let cfg = EntmaxConfig { bisection_iters: 2, tol: 1e-14, ..EntmaxConfig::with_alpha(1.3) };
        match find_tau_with(&[1.0, 0.2, -0.4], &cfg) {
            Err(Error::Numeric { residual, .. }) => assert!(residual.abs() > 1e-14),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn mask_excludes_entries() {
        let mut out = [0.0f64; 3];
        entmax_row(&[5.0, 1.0, 1.0], Some(&[false, true, true]), &EntmaxConfig::default(), &mut out).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn axis_zero_matches_transposed_last_axis() {
        let z = Tensor::<f64>::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64 * 0.3 - 0.4);
        let cfg0 = EntmaxConfig { axis: 0, ..EntmaxConfig::default() };
        let p0 = entmax_forward(&z, &cfg0).unwrap();
        let pt = entmax_forward(&z.transpose().unwrap(), &EntmaxConfig::default()).unwrap();
        assert!(p0.max_abs_diff(&pt.transpose().unwrap()) < 1e-15);
        let g = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let d0 = entmax_backward(&p0, &g, &cfg0).unwrap();
        let dt = entmax_backward(&pt, &g.transpose().unwrap(), &EntmaxConfig::default()).unwrap();
        assert!(d0.max_abs_diff(&dt.transpose().unwrap()) < 1e-15);
    }
}
