//! Central finite-difference gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::{margin_loss_var, MarginConfig};
use crate::entmax::EntmaxConfig;
use crate::error::Result;
use crate::model::{ConvSpec, ForwardOptions, Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::routing::{AttentionRoutingLayer, Normalizer, SimplifiedRoutingLayer};
use crate::tensor::{Graph, Tensor, Var};

/// `‖a − n‖ / max(‖a‖, ‖n‖)` per input, between analytic and numeric gradients.
pub fn relative_errors<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let v = f(&g, &vars)?.to_tensor().item();
        Ok(v)
    };
    let mut out = Vec::with_capacity(inputs.len());
    for (k, a) in analytic.iter().enumerate() {
        let mut xs = inputs.to_vec();
        let mut num = vec![0.0; a.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - eps;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let num = Tensor::new(a.shape(), num)?;
        let scale = a.norm().max(num.norm());
        out.push(if scale == 0.0 { 0.0 } else { a.sub(&num)?.norm() / scale });
    }
    Ok(out)
}

/// A named check and its worst relative error.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn worst(v: Vec<f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

/// Weighted sum so that every output coordinate reaches the loss.
fn probe<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(&y.shape(), 1.0, &mut rng);
    Ok(y.mul_const(&w)?.sum_all())
}

pub fn check_entmax(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[6, 7], 1.0, &mut rng);
    let mut e = 0.0f64;
    for alpha in [1.5, 2.0, 1.3] {
        let cfg = EntmaxConfig { bisection_iters: 200, tol: 1e-14, ..EntmaxConfig::with_alpha(alpha) };
        e = e.max(worst(relative_errors(std::slice::from_ref(&z), 1e-6, |_, v| probe(v[0].entmax(&cfg, None)?, seed + 1))?));
    }
    Ok(e)
}

pub fn check_householder(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = crate::ortho::random_vectors::<f64, _>(1, 6, &mut rng).reshape(&[6, 6])?;
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    Ok(worst(relative_errors(&[x, b], 1e-5, |_, v| probe(v[0].householder(v[1])?, seed + 2))?))
}

/// Routers with the input and every weight as checked inputs.
pub fn check_routers(seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let att = AttentionRoutingLayer::new(&mut store, "a", 4, 2, Normalizer::entmax(1.5), true, &mut rng)?;
    let simp = SimplifiedRoutingLayer::new(&mut store, "s", 4, Normalizer::entmax(1.5), true, &mut rng);
    let u = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let mut inputs = vec![u];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    let att_err = worst(relative_errors(&inputs, 1e-5, |_, v| {
        let p = crate::params::Bound::from_vars(v[1..].to_vec());
        probe(att.forward(&p, v[0], None)?, seed + 3)
    })?);
    let simp_err = worst(relative_errors(&inputs, 1e-5, |_, v| {
        let p = crate::params::Bound::from_vars(v[1..].to_vec());
        probe(simp.forward(&p, v[0], None)?, seed + 4)
    })?);
    Ok((att_err, simp_err))
}

/// A 3-class model with one simplified-routing block, no pruning and no
/// dropout, so the loss is smooth away from ReLU and entmax kinks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Shallow,
        input: (1, 6, 6),
        classes: 3,
        n_caps: 3,
        d: 4,
        theta: 1.0,
        blocks: 1,
        layers_per_block: 1,
        backbone: vec![ConvSpec::new(4, 3, 1, 0)],
        primary_kernel: 4,
        primary_stride: 1,
        primary_padding: 0,
        dropout: 0.0,
        ..ModelConfig::shallow_mnist()
    }
}

pub fn check_model(seed: u64) -> Result<f64> {
    let model = Model::<f64>::new(toy_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
    let x = Tensor::randn(&[2, 1, 6, 6], 1.0, &mut rng);
    let labels = [0usize, 2];
    let inputs: Vec<Tensor<f64>> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
    let keep = vec![true; model.cfg.n_caps];
    Ok(worst(relative_errors(&inputs, 1e-6, |g, v| {
        let p = crate::params::Bound::from_vars(v.to_vec());
        let opts = ForwardOptions { mask: Some(keep.clone()), ..ForwardOptions::eval() };
        let out = model.forward(&p, g.constant(x.clone()), opts)?;
        margin_loss_var(out.lengths, &labels, &MarginConfig::default())
    })?))
}

/// Every check at its tolerance.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let (att, simp) = check_routers(seed)?;
    Ok(vec![
        CheckResult { name: "entmax", error: check_entmax(seed)?, tolerance: 1e-4 },
        CheckResult { name: "householder", error: check_householder(seed)?, tolerance: 1e-4 },
        CheckResult { name: "attention-routing", error: att, tolerance: 1e-4 },
        CheckResult { name: "simplified-routing", error: simp, tolerance: 1e-4 },
        CheckResult { name: "model", error: check_model(seed)?, tolerance: 1e-3 },
    ])
}
