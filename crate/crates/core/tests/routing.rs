#![allow(clippy::needless_range_loop)]

use orthcaps::entmax::{entmax_forward, EntmaxConfig};
use orthcaps::ortho::HouseholderStack;
use orthcaps::params::ParamStore;
use orthcaps::routing::{
    attention_route, coupling_sparsity, dynamic_route, dynamic_route_with_state, AttentionRoutingLayer, Normalizer,
    Projection, SimplifiedRoutingLayer,
};
use orthcaps::tensor::graph_softmax_last;
use orthcaps::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn squash_vec(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    let n = n2.sqrt();
    if n < 1e-9 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|x| n2 / (1.0 + n2) * x / n).collect()
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Routing by agreement written out index by index.
fn dynamic_oracle(u_hat: &Tensor, iters: usize) -> Tensor {
    let s = u_hat.shape();
    let (bs, n, m, d) = (s[0], s[1], s[2], s[3]);
    let uh = |b: usize, i: usize, j: usize, k: usize| u_hat.data()[((b * n + i) * m + j) * d + k];
    let mut out = Vec::new();
    for b in 0..bs {
        let mut logit = vec![vec![0.0; m]; n];
        let mut v = vec![vec![0.0; d]; m];
        for _ in 0..iters {
            let c: Vec<Vec<f64>> = logit.iter().map(|row| softmax_vec(row)).collect();
            for j in 0..m {
                let mut sj = vec![0.0; d];
                for i in 0..n {
                    for k in 0..d {
                        sj[k] += c[i][j] * uh(b, i, j, k);
                    }
                }
                v[j] = squash_vec(&sj);
            }
            for i in 0..n {
                for j in 0..m {
                    let mut dot = 0.0;
                    for k in 0..d {
                        dot += uh(b, i, j, k) * v[j][k];
                    }
                    logit[i][j] += dot;
                }
            }
        }
        out.extend(v.into_iter().flatten());
    }
    Tensor::new(&[bs, m, d], out).unwrap()
}

fn dense(store: &ParamStore, p: Projection) -> Tensor {
    match p {
        Projection::Orthogonal(id) => HouseholderStack::from_vectors(store.get(id).value.clone()).unwrap().materialize().unwrap(),
        Projection::Dense(id) => store.get(id).value.clone(),
    }
}

fn row_sums_are_one(c: &Tensor) -> bool {
    let n = *c.shape().last().unwrap();
    c.data().chunks(n).all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-6)
}

#[test]
fn dynamic_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let iters = [1, 3, 5][case % 3];
        let (b, n, m, d) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..5), rng.random_range(1..6));
        let u_hat = Tensor::randn(&[b, n, m, d], 1.0, &mut rng);
        let v = dynamic_route(&u_hat, iters).unwrap();
        worst = worst.max(v.max_abs_diff(&dynamic_oracle(&u_hat, iters)));
    }
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn dynamic_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let u_hat: Tensor = Tensor::randn(&[2, 5, 1, 3], 1.0, &mut rng);
    let v = dynamic_route(&u_hat, 4).unwrap();
    for b in 0..2 {
        let mut s = vec![0.0; 3];
        for i in 0..5 {
            for k in 0..3 {
                s[k] += u_hat.at(&[b, i, 0, k]);
            }
        }
        let expect = squash_vec(&s);
        for k in 0..3 {
            assert!((v.at(&[b, 0, k]) - expect[k]).abs() <= 1e-12);
        }
    }
    let one = Tensor::randn(&[1, 1, 1, 4], 1.0, &mut rng);
    let twice = Tensor::new(&[1, 1, 2, 4], [one.data(), one.data()].concat()).unwrap();
    let (v, state) = dynamic_route_with_state(&twice, 3, &Normalizer::Softmax).unwrap();
    assert_eq!(&v.data()[..4], &v.data()[4..]);
    assert!(state.c.data().iter().all(|&c: &f64| (c - 0.5).abs() < 1e-15));
    assert!(matches!(dynamic_route(&twice, 0), Err(Error::Contract(_))));
}

#[test]
fn attention_matches_composition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut store = ParamStore::<f64>::new();
    let (n, d) = (5, 6);
    let layer = AttentionRoutingLayer::new(&mut store, "a", d, 1, Normalizer::entmax(2.0), true, &mut rng).unwrap();
    let u = Tensor::randn(&[3, n, d], 1.0, &mut rng);
    let got = attention_route(&u, &layer, &store).unwrap();
    let [wq, wk, wv] = layer.projections().map(|p| dense(&store, p).transpose().unwrap());
    for b in 0..3 {
        let ub = Tensor::new(&[n, d], u.data()[b * n * d..(b + 1) * n * d].to_vec()).unwrap();
        let (q, k, v) = (ub.matmul(&wq).unwrap(), ub.matmul(&wk).unwrap(), ub.matmul(&wv).unwrap());
        let logits = q.matmul(&k.transpose().unwrap()).unwrap().scale(1.0 / (d as f64).sqrt());
        let c = entmax_forward(&logits, &EntmaxConfig::sparsemax()).unwrap();
        let s = c.matmul(&v).unwrap();
        for i in 0..n {
            let expect = squash_vec(&s.data()[i * d..(i + 1) * d]);
            for kk in 0..d {
                assert!((got.at(&[b, i, kk]) - expect[kk]).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn identical_capsules_route_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut store = ParamStore::<f64>::new();
    let att = AttentionRoutingLayer::new(&mut store, "a", 8, 4, Normalizer::entmax(1.5), true, &mut rng).unwrap();
    let simp = SimplifiedRoutingLayer::new(&mut store, "s", 8, Normalizer::entmax(1.5), true, &mut rng);
    let row = Tensor::randn(&[8], 1.0, &mut rng);
    let other = Tensor::randn(&[8], 1.0, &mut rng);
    let u = Tensor::new(&[1, 3, 8], [row.data(), other.data(), row.data()].concat()).unwrap();
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    for v in [att.forward(&p, g.constant(u.clone()), None).unwrap(), simp.forward(&p, g.constant(u.clone()), None).unwrap()] {
        let v = v.to_tensor();
        assert_eq!(&v.data()[..8], &v.data()[16..]);
    }
}

#[test]
fn simplified_with_identity_map_and_orthogonal_inputs() {
    // Even number of equal reflections gives W = I; rows with squared norm
    // 4 = 2√d make every sparsemax row one-hot, so C = I.
    let d = 4;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let layer = SimplifiedRoutingLayer::new(&mut store, "s", d, Normalizer::entmax(2.0), true, &mut rng);
    let mut vecs = Tensor::zeros(&[d, d]);
    for i in 0..d {
        vecs.data_mut()[i * d] = 1.0;
    }
    store.get_mut(layer.wp.param()).value = vecs;
    let q = HouseholderStack::<f64>::random(d, &mut rng).materialize().unwrap();
    let u = q.scale(2.0).reshape(&[1, d, d]).unwrap();
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let (v, c) = layer.forward_with_coupling(&p, g.constant(u.clone()), None).unwrap();
    assert!(c.to_tensor().max_abs_diff(&Tensor::eye(d).reshape(&[1, d, d]).unwrap()) <= 1e-12);
    let v = v.to_tensor();
    for i in 0..d {
        let expect = squash_vec(&u.data()[i * d..(i + 1) * d]);
        for k in 0..d {
            assert!((v.at(&[0, i, k]) - expect[k]).abs() <= 1e-12);
        }
    }
}

#[test]
fn routers_evaluate_weights_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let mut store = ParamStore::<f64>::new();
    let att = AttentionRoutingLayer::new(&mut store, "a", 16, 4, Normalizer::entmax(1.5), true, &mut rng).unwrap();
    let simp = SimplifiedRoutingLayer::new(&mut store, "s", 16, Normalizer::entmax(1.5), true, &mut rng);
    let u = Tensor::randn(&[4, 16, 16], 1.0, &mut rng);
    let g = Graph::new();
    let p = store.bind(&g);
    att.forward(&p, g.constant(u.clone()), None).unwrap();
    assert_eq!(g.op_count("householder"), 3);
    let g = Graph::new();
    let p = store.bind(&g);
    simp.forward(&p, g.constant(u), None).unwrap();
    assert_eq!(g.op_count("householder"), 1);
}

#[test]
fn sparsity_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let z: Tensor = Tensor::randn(&[20, 9], 2.0, &mut rng);
    assert_eq!(coupling_sparsity(&graph_softmax_last(&z).unwrap()), 0.0);
    assert!((coupling_sparsity(&Tensor::<f64>::eye(5)) - 0.8).abs() < 1e-15);
    let c = entmax_forward(&z, &EntmaxConfig::with_alpha(1.5)).unwrap();
    let zeros = c.data().iter().filter(|&&v| v == 0.0).count() as f64 / c.len() as f64;
    let s = coupling_sparsity(&c);
    assert!(s > 0.0 && s < 1.0);
    assert_eq!(s, zeros);
}

#[test]
fn masked_keys_get_no_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let mut store = ParamStore::<f64>::new();
    let att = AttentionRoutingLayer::new(&mut store, "a", 8, 2, Normalizer::Softmax, true, &mut rng).unwrap();
    let u = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
    let mask = [true, false, true, false];
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let (_, c) = att.forward_with_coupling(&p, g.constant(u), Some(&mask)).unwrap();
    let c = c.to_tensor();
    for row in c.data().chunks(4) {
        assert_eq!(row[1], 0.0);
        assert_eq!(row[3], 0.0);
    }
    assert!(row_sums_are_one(&c));
}

fn norm_strategy() -> impl Strategy<Value = Normalizer> {
    prop::sample::select(vec![Normalizer::Softmax, Normalizer::entmax(1.5), Normalizer::entmax(2.0)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_coupling_row_sums_to_one(seed in 0u64..100_000, n in 1usize..10, heads in 1usize..3, norm in norm_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4 * heads;
        let mut store = ParamStore::<f64>::new();
        let att = AttentionRoutingLayer::new(&mut store, "a", d, heads, norm, true, &mut rng).unwrap();
        let simp = SimplifiedRoutingLayer::new(&mut store, "s", d, norm, true, &mut rng);
        let u = Tensor::randn(&[2, n, d], 1.5, &mut rng);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let (_, ca) = att.forward_with_coupling(&p, g.constant(u.clone()), None).unwrap();
        let (_, cs) = simp.forward_with_coupling(&p, g.constant(u), None).unwrap();
        prop_assert!(row_sums_are_one(&ca.to_tensor()));
        prop_assert!(row_sums_are_one(&cs.to_tensor()));
        let u_hat = Tensor::randn(&[2, n, 3, d], 1.0, &mut rng);
        let (_, state) = dynamic_route_with_state(&u_hat, 3, &norm).unwrap();
        prop_assert!(row_sums_are_one(&state.c));
    }
}
