//! Capsule values: squash, activeness ordering, the batch cosine-similarity
//! matrix, similarity pruning and the margin loss.

use crate::error::{contract, dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor, Var};

/// Norm below which a capsule counts as zero.
pub const EPS: f64 = 1e-9;

/// Capsules laid out as `[B, n, d, W, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleTensor<T: Scalar = f64> {
    data: Tensor<T>,
}

impl<T: Scalar> CapsuleTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() != 5 {
            return Err(dim_err(format!("capsule tensor must be [B,n,d,W,H], got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    /// `[B, n, d]` capsules with no spatial extent.
    pub fn from_vectors(v: &Tensor<T>) -> Result<Self> {
        let s = v.shape();
        if s.len() != 3 {
            return Err(dim_err(format!("expected [B,n,d], got {s:?}")));
        }
        Self::new(v.reshape(&[s[0], s[1], s[2], 1, 1])?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[3], self.data.shape()[4])
    }

    /// `[B, n, d·W·H]`.
    pub fn flatten(&self) -> Tensor<T> {
        let s = self.data.shape();
        self.data.reshape(&[s[0], s[1], s[2] * s[3] * s[4]]).expect("lossless reshape")
    }

    /// Keeps the listed capsule types, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let s = self.data.shape().to_vec();
        if indices.is_empty() {
            return Err(dim_err("capsule selection is empty"));
        }
        let slab = s[2] * s[3] * s[4];
        let mut out = Vec::with_capacity(s[0] * indices.len() * slab);
        for b in 0..s[0] {
            for &i in indices {
                if i >= s[1] {
                    return Err(dim_err(format!("capsule index {i} out of range {}", s[1])));
                }
                out.extend_from_slice(&self.data.data()[(b * s[1] + i) * slab..][..slab]);
            }
        }
        Self::new(Tensor::new(&[s[0], indices.len(), s[2], s[3], s[4]], out)?)
    }
}

/// `v = s · ‖s‖ / (1 + ‖s‖²)` along the last axis, i.e. length
/// `‖s‖²/(1+‖s‖²)` in the direction of `s`.
pub fn squash<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *s.shape().last().ok_or_else(|| dim_err("squash on a rank-0 tensor"))?;
    let mut out = s.data().to_vec();
    for v in out.chunks_mut(d) {
        let r = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        let k = r / (T::one() + r * r);
        v.iter_mut().for_each(|x| *x *= k);
    }
    Tensor::new(s.shape(), out)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Squash along the last axis.
    pub fn squash(self) -> Result<Var<'g, T>> {
        let out = squash(&self.value())?;
        let eps = T::of(EPS);
        Ok(self.graph().push_op(
            "squash",
            out,
            &[self],
            Box::new(move |args| {
                let (s, g) = (args.inputs[0], args.grad);
                let d = *s.shape().last().unwrap();
                let mut ds = vec![T::zero(); s.len()];
                for ((sv, gv), dv) in s.data().chunks(d).zip(g.data().chunks(d)).zip(ds.chunks_mut(d)) {
                    let r2: T = sv.iter().map(|&x| x * x).sum();
                    let r = r2.sqrt();
                    let den = T::one() + r2;
                    let k = r / den;
                    // dk/dr · (s·g) / r
                    let c = if r > eps {
                        let sg: T = sv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
                        (T::one() - r2) / (den * den) * sg / r
                    } else {
                        T::zero()
                    };
                    for ((o, &x), &gx) in dv.iter_mut().zip(sv).zip(gv) {
                        *o = k * gx + c * x;
                    }
                }
                vec![Some(Tensor::from_parts(s.shape().to_vec(), ds))]
            }),
        ))
    }
}

/// Per-type L2 norm of the flattened capsule slice, averaged over the batch.
pub fn activeness<T: Scalar>(u: &CapsuleTensor<T>) -> Vec<T> {
    let flat = u.flatten();
    let (b, n, dd) = (flat.shape()[0], flat.shape()[1], flat.shape()[2]);
    let mut act = vec![T::zero(); n];
    for bi in 0..b {
        for (i, a) in act.iter_mut().enumerate() {
            let v = &flat.data()[(bi * n + i) * dd..][..dd];
            *a += v.iter().map(|&x| x * x).sum::<T>().sqrt();
        }
    }
    let inv = T::one() / T::of(b as f64);
    act.iter_mut().for_each(|a| *a *= inv);
    act
}

/// Batch-mean cosine similarities `t[n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T: Scalar = f64> {
    pub t: Tensor<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn n(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.t.data()[i * self.n() + j]
    }

    /// Similarities of all unordered pairs among `members`.
    pub fn pair_values(&self, members: &[usize]) -> Vec<T> {
        let mut out = Vec::new();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

/// One normalized batched Gram product, averaged over the batch.
pub fn similarity_matrix<T: Scalar>(u_flat: &Tensor<T>) -> Result<SimilarityMatrix<T>> {
    if u_flat.rank() != 3 {
        return Err(dim_err(format!("similarity matrix needs [B,n,D], got {:?}", u_flat.shape())));
    }
    let (b, n, dd) = (u_flat.shape()[0], u_flat.shape()[1], u_flat.shape()[2]);
    let eps = T::of(EPS);
    let mut unit = u_flat.data().to_vec();
    for v in unit.chunks_mut(dd) {
        let r = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        let inv = if r > eps { T::one() / r } else { T::zero() };
        v.iter_mut().for_each(|x| *x *= inv);
    }
    let unit = Tensor::new(&[b, n, dd], unit)?;
    let gram = unit.matmul(&kernels::transpose_last2(&unit)?)?;
    let mean = kernels::sum_axis(&gram, 0, false)?.scale(T::one() / T::of(b as f64));
    Ok(SimilarityMatrix { t: mean })
}

/// Keep/drop decision per capsule type.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    /// Indexed by original capsule type.
    pub keep: Vec<bool>,
    pub theta: f64,
    /// Capsule types by descending activeness (stable on ties).
    pub order: Vec<usize>,
}

impl PruneMask {
    pub fn all(n: usize, theta: f64) -> Self {
        Self { keep: vec![true; n], theta, order: (0..n).collect() }
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Kept types in activeness order.
    pub fn kept_in_order(&self) -> Vec<usize> {
        self.order.iter().copied().filter(|&i| self.keep[i]).collect()
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(contract(format!("pruning threshold must lie in (0, 1], got {theta}")));
    }
    Ok(())
}

/// Drops capsule `i` whenever some more active capsule `j` has `t_ij > theta`.
pub fn prune_mask<T: Scalar>(u: &CapsuleTensor<T>, theta: f64) -> Result<PruneMask> {
    check_theta(theta)?;
    let act = activeness(u);
    let sim = similarity_matrix(&u.flatten())?;
    let mut order: Vec<usize> = (0..act.len()).collect();
    order.sort_by(|&a, &b| act[b].partial_cmp(&act[a]).unwrap_or(std::cmp::Ordering::Equal));
    let th = T::of(theta);
    let mut keep = vec![true; act.len()];
    for (rank, &i) in order.iter().enumerate() {
        if order[..rank].iter().any(|&j| sim.get(i, j) > th) {
            keep[i] = false;
        }
    }
    Ok(PruneMask { keep, theta, order })
}

/// Orders capsules by activeness, masks redundant ones and re-packs the
/// survivors into `[B, n', d, W, H]`.
pub fn prune<T: Scalar>(u: &CapsuleTensor<T>, theta: f64) -> Result<(CapsuleTensor<T>, PruneMask)> {
    let mask = prune_mask(u, theta)?;
    let kept = u.select(&mask.kept_in_order())?;
    Ok((kept, mask))
}

/// Running keep-probability per capsule type; frozen for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneEma {
    pub keep_prob: Vec<f64>,
    pub momentum: f64,
    pub updates: u64,
}

impl PruneEma {
    pub fn new(n: usize) -> Self {
        Self { keep_prob: vec![1.0; n], momentum: 0.9, updates: 0 }
    }

    pub fn update(&mut self, mask: &PruneMask) {
        for (p, &k) in self.keep_prob.iter_mut().zip(&mask.keep) {
            *p = self.momentum * *p + (1.0 - self.momentum) * if k { 1.0 } else { 0.0 };
        }
        self.updates += 1;
    }

    /// `keep_prob >= 0.5`, never empty.
    pub fn frozen(&self) -> Vec<bool> {
        let mut keep: Vec<bool> = self.keep_prob.iter().map(|&p| p >= 0.5).collect();
        if !keep.iter().any(|&k| k) {
            let best = (0..keep.len())
                .max_by(|&a, &b| self.keep_prob[a].partial_cmp(&self.keep_prob[b]).unwrap())
                .unwrap_or(0);
            keep[best] = true;
        }
        keep
    }

    pub fn retained(&self) -> usize {
        self.frozen().iter().filter(|&&k| k).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { m_plus: 0.9, m_minus: 0.1, lambda: 0.5 }
    }
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (b, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(contract(format!("label {l} out of range for {classes} classes")));
        }
        t.data_mut()[b * classes + l] = T::one();
    }
    Ok(t)
}

/// Margin loss on capsule lengths `[B, classes]`, summed over classes and
/// averaged over the batch.
pub fn margin_loss<T: Scalar>(lengths: &Tensor<T>, labels: &[usize], cfg: &MarginConfig) -> Result<T> {
    let g = crate::tensor::Graph::new();
    let l = g.constant(lengths.clone());
    let v = margin_loss_var(l, labels, cfg)?.to_tensor().item();
    Ok(v)
}

pub fn margin_loss_var<'g, T: Scalar>(
    lengths: Var<'g, T>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<Var<'g, T>> {
    let s = lengths.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(dim_err(format!("margin loss: lengths {s:?} vs {} labels", labels.len())));
    }
    let g = lengths.graph();
    let target = one_hot::<T>(labels, s[1])?;
    let other = target.map(|t| T::of(cfg.lambda) * (T::one() - t));
    let pos = lengths.neg().add_scalar(cfg.m_plus).relu().powf(2.0);
    let neg = lengths.add_scalar(-cfg.m_minus).relu().powf(2.0);
    let total = pos.mul(g.constant(target))?.add(neg.mul(g.constant(other))?)?;
    Ok(total.sum_all().scale(1.0 / s[0] as f64))
}
