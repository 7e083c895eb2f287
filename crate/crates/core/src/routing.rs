//! Routing between capsule layers.
//!
//! * [`AttentionRoutingLayer`]: `v = squash(entmax(Q Kᵀ / √d_h) V)` with
//!   orthogonal `W_Q`, `W_K`, `W_V`, single pass.
//! * [`SimplifiedRoutingLayer`]: one orthogonal prediction matrix,
//!   `v = squash(entmax(û uᵀ / √d) û)`.
//! * [`dynamic_route`]: the iterative agreement baseline.
//!
//! The attention routers map `n` capsules to `n` capsules over the
//! capsule-type axis; changes in capsule count happen in the convolutional
//! capsule layers.

use rand::Rng;

use crate::entmax::EntmaxConfig;
use crate::error::{contract, dim_err, Result};
use crate::ortho::random_vectors;
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{graph_softmax_last, kernels, Graph, Tensor, Var};

/// Row normalizer used to turn agreement logits into coupling coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalizer {
    Entmax(EntmaxConfig),
    Softmax,
}

impl Normalizer {
    pub fn entmax(alpha: f64) -> Self {
        Normalizer::Entmax(EntmaxConfig::with_alpha(alpha))
    }

    /// Normalizes the last axis; `key_mask == false` entries get zero weight.
    pub fn apply<'g, T: Scalar>(&self, z: Var<'g, T>, key_mask: Option<&[bool]>) -> Result<Var<'g, T>> {
        match self {
            Normalizer::Entmax(cfg) => z.entmax(cfg, key_mask),
            Normalizer::Softmax => match key_mask {
                None => z.softmax(),
                Some(m) => {
                    let n = *z.value().shape().last().unwrap();
                    if m.len() != n {
                        return Err(dim_err("softmax key mask length mismatch"));
                    }
                    let bias = Tensor::from_fn(&[n], |i| if m[i] { T::zero() } else { T::of(-1e30) });
                    z.add(z.graph().constant(bias))?.softmax()
                }
            },
        }
    }
}

/// A learnable `d × d` map applied along the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// Householder vectors; always orthogonal.
    Orthogonal(ParamId),
    /// Unconstrained matrix, `x ↦ W x`.
    Dense(ParamId),
}

impl Projection {
    /// `groups > 1` allocates one independent map per group.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        groups: usize,
        d: usize,
        orthogonal: bool,
        rng: &mut R,
    ) -> Self {
        if orthogonal {
            let mut v = random_vectors::<T, R>(groups, d, rng);
            if groups == 1 {
                v = v.reshape(&[d, d]).unwrap();
            }
            Projection::Orthogonal(store.add(name, v, ParamKind::Householder))
        } else {
            let shape: Vec<usize> = if groups == 1 { vec![d, d] } else { vec![groups, d, d] };
            let w = Tensor::randn(&shape, 1.0 / (d as f64).sqrt(), rng);
            Projection::Dense(store.add(name, w, ParamKind::Weight))
        }
    }

    pub fn param(&self) -> ParamId {
        match *self {
            Projection::Orthogonal(p) | Projection::Dense(p) => p,
        }
    }

    pub fn is_orthogonal(&self) -> bool {
        matches!(self, Projection::Orthogonal(_))
    }

    /// `x [.., d]` (single map) or `x [.., G, d]` (grouped).
    pub fn apply<'g, T: Scalar>(&self, bound: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match *self {
            Projection::Orthogonal(p) => x.householder(bound.var(p)),
            Projection::Dense(p) => {
                let w = bound.var(p);
                let ws = w.shape();
                if ws.len() == 2 {
                    let xs = x.shape();
                    let d = *xs.last().unwrap();
                    let rows = xs.iter().product::<usize>() / d;
                    x.reshape(&[rows, d])?.matmul(w.transpose()?)?.reshape(&xs)
                } else {
                    // grouped: x [.., G, d] -> [.., G, d, 1], W [G, d, d]
                    let xs = x.shape();
                    let mut col = xs.clone();
                    col.push(1);
                    w.matmul(x.reshape(&col)?)?.reshape(&xs)
                }
            }
        }
    }
}

fn check_capsules<T: Scalar>(u: &Var<'_, T>, d: usize) -> Result<(usize, usize)> {
    let s = u.shape();
    if s.len() != 3 || s[2] != d {
        return Err(dim_err(format!("routing input must be [N, n, {d}], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRoutingLayer {
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub heads: usize,
    pub d: usize,
    pub normalizer: Normalizer,
}

impl AttentionRoutingLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        normalizer: Normalizer,
        orthogonal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(contract(format!("capsule dim {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Projection::new(store, &format!("{name}.wq"), 1, d, orthogonal, rng),
            wk: Projection::new(store, &format!("{name}.wk"), 1, d, orthogonal, rng),
            wv: Projection::new(store, &format!("{name}.wv"), 1, d, orthogonal, rng),
            heads,
            d,
            normalizer,
        })
    }

    pub fn projections(&self) -> [Projection; 3] {
        [self.wq, self.wk, self.wv]
    }

    /// Returns the routed capsules `[N, n, d]` and the coupling map `[N, h, n, n]`.
    pub fn forward_with_coupling<'g, T: Scalar>(
        &self,
        bound: &Bound<'g, T>,
        u: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (nb, n) = check_capsules(&u, self.d)?;
        let (h, dh) = (self.heads, self.d / self.heads);
        let q = self.wq.apply(bound, u)?;
        let k = self.wk.apply(bound, u)?;
        let v = self.wv.apply(bound, u)?;
        let split = |t: Var<'g, T>| -> Result<Var<'g, T>> {
            t.reshape(&[nb, n, h, dh])?.permute(&[0, 2, 1, 3])
        };
        let (q, k, v) = (split(q)?, split(k)?, split(v)?);
        let logits = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
        let c = self.normalizer.apply(logits, key_mask)?;
        let s = c.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[nb, n, self.d])?;
        Ok((s.squash()?, c))
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        bound: &Bound<'g, T>,
        u: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_coupling(bound, u, key_mask)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplifiedRoutingLayer {
    pub wp: Projection,
    pub d: usize,
    pub normalizer: Normalizer,
}

impl SimplifiedRoutingLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        normalizer: Normalizer,
        orthogonal: bool,
        rng: &mut R,
    ) -> Self {
        Self { wp: Projection::new(store, &format!("{name}.wp"), 1, d, orthogonal, rng), d, normalizer }
    }

    /// Returns `(v [N, n, d], C [N, n, n])` with `C = entmax(û uᵀ/√d)` and `s = C û`.
    pub fn forward_with_coupling<'g, T: Scalar>(
        &self,
        bound: &Bound<'g, T>,
        u: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        check_capsules(&u, self.d)?;
        let u_hat = self.wp.apply(bound, u)?;
        let logits = u_hat.matmul(u.transpose()?)?.scale(1.0 / (self.d as f64).sqrt());
        let c = self.normalizer.apply(logits, key_mask)?;
        Ok((c.matmul(u_hat)?.squash()?, c))
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        bound: &Bound<'g, T>,
        u: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_coupling(bound, u, key_mask)?.0)
    }
}

/// Value-level attention routing of `u [N, n, d]`.
pub fn attention_route<T: Scalar>(
    u: &Tensor<T>,
    layer: &AttentionRoutingLayer,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let bound = store.bind_frozen(&g);
    Ok(layer.forward(&bound, g.constant(u.clone()), None)?.to_tensor())
}

/// Value-level simplified routing of `u [N, n, d]`.
pub fn simplified_route<T: Scalar>(
    u: &Tensor<T>,
    layer: &SimplifiedRoutingLayer,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let bound = store.bind_frozen(&g);
    Ok(layer.forward(&bound, g.constant(u.clone()), None)?.to_tensor())
}

/// Routing logits and couplings after the last iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicRoutingState<T: Scalar = f64> {
    /// `[B, n, m]`
    pub b: Tensor<T>,
    /// `[B, n, m]`, rows sum to one over `m`.
    pub c: Tensor<T>,
    pub iterations: usize,
}

fn check_u_hat(s: &[usize], iters: usize) -> Result<(usize, usize, usize, usize)> {
    if iters < 1 {
        return Err(contract("dynamic routing needs at least one iteration"));
    }
    if s.len() != 4 {
        return Err(dim_err(format!("dynamic routing needs û [B, n, m, d], got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn row_normalize<T: Scalar>(b: &Tensor<T>, norm: &Normalizer) -> Result<Tensor<T>> {
    match norm {
        Normalizer::Softmax => graph_softmax_last(b),
        Normalizer::Entmax(cfg) => crate::entmax::entmax_forward(b, &EntmaxConfig { axis: -1, ..*cfg }),
    }
}

/// `s_j = Σ_i c_ij û_{j|i}` with `c [B,n,m]`, `û [B,n,m,d]` → `[B,m,d]`.
fn weighted_votes<T: Scalar>(c: &Tensor<T>, u_hat: &Tensor<T>) -> Result<Tensor<T>> {
    let s = c.shape();
    let cw = c.reshape(&[s[0], s[1], s[2], 1])?;
    kernels::sum_axis(&cw.mul(u_hat)?, 1, false)
}

/// Agreement update `b_ij += û_{j|i} · v_j`.
fn agreement<T: Scalar>(u_hat: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let s = v.shape();
    let vv = v.reshape(&[s[0], 1, s[1], s[2]])?;
    kernels::sum_axis(&u_hat.mul(&vv)?, 3, false)
}

/// Iterative routing-by-agreement on prediction vectors `û [B, n, m, d]`.
pub fn dynamic_route<T: Scalar>(u_hat: &Tensor<T>, iters: usize) -> Result<Tensor<T>> {
    Ok(dynamic_route_with_state(u_hat, iters, &Normalizer::Softmax)?.0)
}

pub fn dynamic_route_with_state<T: Scalar>(
    u_hat: &Tensor<T>,
    iters: usize,
    norm: &Normalizer,
) -> Result<(Tensor<T>, DynamicRoutingState<T>)> {
    let (b, n, m, _) = check_u_hat(u_hat.shape(), iters)?;
    let mut logits = Tensor::zeros(&[b, n, m]);
    let mut c = row_normalize(&logits, norm)?;
    let mut v = Tensor::zeros(&[b, m, u_hat.shape()[3]]);
    for _ in 0..iters {
        c = row_normalize(&logits, norm)?;
        v = crate::capsule::squash(&weighted_votes(&c, u_hat)?)?;
        logits = logits.add(&agreement(u_hat, &v)?)?;
    }
    Ok((v, DynamicRoutingState { b: logits, c, iterations: iters }))
}

/// Differentiable dynamic routing. The couplings of the last iteration are
/// treated as constants, so gradients reach `û` through the final
/// weighted vote only.
pub fn dynamic_route_var<'g, T: Scalar>(
    u_hat: Var<'g, T>,
    iters: usize,
    norm: &Normalizer,
) -> Result<(Var<'g, T>, Tensor<T>)> {
    let uh = u_hat.to_tensor();
    let (b, n, m, _) = check_u_hat(uh.shape(), iters)?;
    let mut logits = Tensor::zeros(&[b, n, m]);
    for _ in 0..iters - 1 {
        let c = row_normalize(&logits, norm)?;
        let v = crate::capsule::squash(&weighted_votes(&c, &uh)?)?;
        logits = logits.add(&agreement(&uh, &v)?)?;
    }
    let c = row_normalize(&logits, norm)?;
    let g = u_hat.graph();
    let cw = g.constant(c.reshape(&[b, n, m, 1])?);
    let v = u_hat.mul(cw)?.sum(1, false)?.squash()?;
    Ok((v, c))
}

/// Per-pair prediction matrices followed by dynamic routing.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicRoutingLayer {
    /// `n·m` maps, grouped.
    pub predict: Projection,
    pub n_in: usize,
    pub n_out: usize,
    pub d: usize,
    pub iterations: usize,
    pub normalizer: Normalizer,
}

impl DynamicRoutingLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        d: usize,
        iterations: usize,
        normalizer: Normalizer,
        orthogonal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if iterations < 1 {
            return Err(contract("dynamic routing needs at least one iteration"));
        }
        let predict = Projection::new(store, &format!("{name}.w"), n_in * n_out, d, orthogonal, rng);
        Ok(Self { predict, n_in, n_out, d, iterations, normalizer })
    }

    /// `u [B, n, d]` → `v [B, m, d]`.
    pub fn forward<'g, T: Scalar>(&self, bound: &Bound<'g, T>, u: Var<'g, T>) -> Result<Var<'g, T>> {
        let (b, n) = check_capsules(&u, self.d)?;
        if n != self.n_in {
            return Err(dim_err(format!("dynamic routing layer expects {} capsules, got {n}", self.n_in)));
        }
        let u_hat = votes(bound, &self.predict, u, self.n_out)?
            .reshape(&[b, self.n_in, self.n_out, self.d])?;
        Ok(dynamic_route_var(u_hat, self.iterations, &self.normalizer)?.0)
    }
}

/// Broadcasts `u [B, n, d]` over `m` outputs and applies the grouped
/// prediction maps: `[B, n·m, d]`.
pub(crate) fn votes<'g, T: Scalar>(
    bound: &Bound<'g, T>,
    predict: &Projection,
    u: Var<'g, T>,
    m: usize,
) -> Result<Var<'g, T>> {
    let s = u.shape();
    let (lead, n, d) = (&s[..s.len() - 2], s[s.len() - 2], s[s.len() - 1]);
    let mut expanded: Vec<usize> = lead.to_vec();
    expanded.extend([n, 1, d]);
    let mut tiled: Vec<usize> = lead.to_vec();
    tiled.extend([n * m, d]);
    let ones = u.graph().constant(Tensor::ones(&[1, m, 1]));
    let x = u.reshape(&expanded)?.mul(ones)?.reshape(&tiled)?;
    predict.apply(bound, x)
}

/// Fraction of exactly-zero coupling coefficients.
pub fn coupling_sparsity<T: Scalar>(c: &Tensor<T>) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    c.data().iter().filter(|&&x| x == T::zero()).count() as f64 / c.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_capsule_attention_is_squashed_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let layer = AttentionRoutingLayer::new(&mut store, "r", 8, 2, Normalizer::entmax(1.5), true, &mut rng).unwrap();
        let u = Tensor::randn(&[3, 1, 8], 1.0, &mut rng);
        let v = attention_route(&u, &layer, &store).unwrap();
        let Projection::Orthogonal(p) = layer.wv else { unreachable!() };
        let wv = crate::ortho::HouseholderStack::from_vectors(store.get(p).value.clone()).unwrap();
        let expect = crate::capsule::squash(&wv.apply(&u).unwrap()).unwrap();
        assert!(v.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        assert!(AttentionRoutingLayer::new(&mut store, "r", 6, 4, Normalizer::Softmax, true, &mut rng).is_err());
    }

    #[test]
    fn dynamic_single_output_is_plain_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u_hat = Tensor::<f64>::randn(&[2, 5, 1, 4], 0.5, &mut rng);
        let summed = kernels::sum_axis(&u_hat, 1, false).unwrap();
        let expect = crate::capsule::squash(&summed).unwrap();
        for t in [1, 3] {
            let v = dynamic_route(&u_hat, t).unwrap();
            assert!(v.max_abs_diff(&expect) < 1e-12);
        }
        assert!(dynamic_route(&u_hat, 0).is_err());
    }

    #[test]
    fn dynamic_symmetric_outputs_stay_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let one = Tensor::<f64>::randn(&[1, 1, 1, 3], 1.0, &mut rng);
        let both = Tensor::new(&[1, 1, 2, 3], [one.data(), one.data()].concat()).unwrap();
        let (v, st) = dynamic_route_with_state(&both, 4, &Normalizer::Softmax).unwrap();
        assert_eq!(&v.data()[..3], &v.data()[3..]);
        assert!((st.c.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sparsity_examples() {
        let soft = graph_softmax_last(&Tensor::<f64>::from_fn(&[4, 5], |i| i as f64 * 0.3)).unwrap();
        assert_eq!(coupling_sparsity(&soft), 0.0);
        let oh = Tensor::<f64>::new(&[2, 4], vec![1., 0., 0., 0., 0., 0., 1., 0.]).unwrap();
        assert_eq!(coupling_sparsity(&oh), 0.75);
    }
}
