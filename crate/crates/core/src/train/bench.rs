//! Forward-throughput benchmark of the routing layers.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::routing::{
    coupling_sparsity, AttentionRoutingLayer, DynamicRoutingLayer, Normalizer, SimplifiedRoutingLayer,
};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub batch: usize,
    pub n: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub router: String,
    pub shape: BenchShape,
    pub median_seconds: f64,
    /// Samples per second at the median.
    pub fps: f64,
    /// Fraction of exact zeros in the coupling coefficients.
    pub sparsity: f64,
    pub repeats: usize,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("router,batch,n,d,median_seconds,fps,sparsity,repeats\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{:.6e},{:.1},{:.4},{}\n",
            r.router, r.shape.batch, r.shape.n, r.shape.d, r.median_seconds, r.fps, r.sparsity, r.repeats
        );
    }
    s
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

/// Times `f` `repeats` times after `warmup` untimed calls.
pub fn time_median(warmup: usize, repeats: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    median((0..repeats.max(1)).map(|_| {
        let t = Instant::now();
        f();
        t.elapsed().as_secs_f64()
    }).collect())
}

/// Benchmarks, per shape: attention routing (entmax and softmax), simplified
/// routing, and dynamic routing with `T = 3` over per-pair dense prediction
/// matrices. Every router maps `n` capsules to `n` capsules.
pub fn bench_routing(shapes: &[BenchShape], repeats: usize, warmup: usize, alpha: f64, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &shape in shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let BenchShape { batch, n, d } = shape;
        let u = Tensor::<f64>::randn(&[batch, n, d], 0.5, &mut rng);
        let heads = if d % 4 == 0 { 4 } else { 1 };
        let mut store = ParamStore::<f64>::new();
        let att = AttentionRoutingLayer::new(&mut store, "att", d, heads, Normalizer::entmax(alpha), true, &mut rng)?;
        let att_soft = AttentionRoutingLayer { normalizer: Normalizer::Softmax, ..att.clone() };
        let simp = SimplifiedRoutingLayer::new(&mut store, "simp", d, Normalizer::entmax(alpha), true, &mut rng);
        let dyn_layer = DynamicRoutingLayer::new(&mut store, "dyn", n, n, d, 3, Normalizer::Softmax, false, &mut rng)?;

        let mut run = |name: &str, f: &mut dyn FnMut() -> Result<Option<Tensor<f64>>>| -> Result<()> {
            let coupling = f()?;
            let secs = time_median(warmup, repeats, || {
                f().expect("benchmark forward");
            });
            rows.push(BenchRow {
                router: name.into(),
                shape,
                median_seconds: secs,
                fps: batch as f64 / secs.max(1e-12),
                sparsity: coupling.map_or(0.0, |c| coupling_sparsity(&c)),
                repeats,
            });
            Ok(())
        };
        run("attention", &mut || {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            Ok(Some(att.forward_with_coupling(&p, g.constant(u.clone()), None)?.1.to_tensor()))
        })?;
        run("attention-softmax", &mut || {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            Ok(Some(att_soft.forward_with_coupling(&p, g.constant(u.clone()), None)?.1.to_tensor()))
        })?;
        run("simplified", &mut || {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            Ok(Some(simp.forward_with_coupling(&p, g.constant(u.clone()), None)?.1.to_tensor()))
        })?;
        run("dynamic-t3", &mut || {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            dyn_layer.forward(&p, g.constant(u.clone()))?;
            Ok(None)
        })?;
    }
    Ok(rows)
}

/// `fps(a) / fps(b)` for the first shape.
pub fn speedup(rows: &[BenchRow], a: &str, b: &str) -> Option<f64> {
    let fa = rows.iter().find(|r| r.router == a)?.fps;
    let fb = rows.iter().find(|r| r.router == b)?.fps;
    Some(fa / fb)
}
