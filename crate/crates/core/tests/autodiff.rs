use orthcaps::gradcheck::relative_errors;
use orthcaps::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for t in 0..k {
                out[i * p + j] += a.data()[i * k + t] * b.data()[t * p + j];
            }
        }
    }
    Tensor::new(&[m, p], out).unwrap()
}

/// Direct cross-correlation over `[B, Cin, H, W]` with `[Cout, Cin/g, k, k]`.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let per_out = cout / groups;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            let grp = o / per_out;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cg {
                        let ci = grp * cg + c;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[n, ci, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                    out[((n * cout + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    assert_eq!(cin % groups, 0);
    Tensor::new(&[b, cout, oh, ow], out).unwrap()
}

#[test]
fn matmul_examples() {
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    let z = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let c = Tensor::new(&[2, 1], vec![0.0, 5.0]).unwrap();
    assert_eq!(z.matmul(&c).unwrap().data(), &[0.0, 0.0]);
    let mut r = rng(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
}

#[test]
fn matmul_shape_error_names_both() {
    let e = Tensor::<f64>::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = e.to_string();
    assert!(matches!(e, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn elementwise_examples() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    assert_eq!(a.add(b).unwrap().to_tensor().data(), &[4.0, 6.0]);
    let m = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap()).relu();
    assert_eq!(m.to_tensor().data(), &[0.0, 2.0]);
    let col = g.constant(Tensor::zeros(&[2, 1]));
    let row = g.constant(Tensor::zeros(&[1, 3]));
    assert_eq!(col.add(row).unwrap().shape(), vec![2, 3]);
    assert!(matches!(
        g.constant(Tensor::zeros(&[2])).add(g.constant(Tensor::zeros(&[3]))),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn division_by_zero_propagates_ieee() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    let z = g.constant(Tensor::zeros(&[2]));
    let q = a.div(z).unwrap().to_tensor();
    assert!(q.data()[0].is_infinite());
    assert!(q.data()[1].is_nan());
}

#[test]
fn reduce_examples() {
    let g = Graph::<f64>::new();
    let v = g.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    assert_eq!(v.l2norm(0, false).unwrap().to_tensor().item(), 5.0);
    let m = g.constant(Tensor::new(&[3], vec![1.0, 5.0, 2.0]).unwrap());
    assert_eq!(m.max(0, false).unwrap().to_tensor().item(), 5.0);
    assert!(matches!(m.sum(1, false), Err(Error::Dimension(_))));
}

#[test]
fn backward_examples() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap());
    let grads = g.backward(x.sum_all()).unwrap();
    assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);

    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let unused = g.leaf(Tensor::new(&[2], vec![7.0, 7.0]).unwrap());
    let loss = x.mul(x).unwrap().sum_all().scale(0.5);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).data(), &[1.0, 2.0]);
    assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn conv_examples() {
    let g = Graph::<f64>::new();
    let mut r = rng(3);
    let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
    let mut id = Tensor::zeros(&[2, 2, 1, 1]);
    id.data_mut()[0] = 1.0;
    id.data_mut()[3] = 1.0;
    let y = g.constant(x.clone()).conv2d(g.constant(id), 1, 0, 1).unwrap().to_tensor();
    assert_eq!(y, x);
    let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.constant(Tensor::ones(&[1, 1, 3, 3])).conv2d(ones, 1, 0, 1).unwrap().to_tensor();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
    let small = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(matches!(small.conv2d(g.constant(Tensor::zeros(&[1, 1, 3, 3])), 1, 0, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv_matches_loop_oracle() {
    let mut r = rng(4);
    for (cin, cout, k, s, p, groups) in [(3, 4, 3, 1, 1, 1), (4, 8, 3, 2, 0, 4), (6, 6, 2, 1, 1, 3), (2, 3, 5, 2, 2, 1)] {
        let x = Tensor::randn(&[2, cin, 7, 6], 1.0, &mut r);
        let w = Tensor::randn(&[cout, cin / groups, k, k], 1.0, &mut r);
        let g = Graph::<f64>::new();
        let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), s, p, groups).unwrap().to_tensor();
        assert!(y.max_abs_diff(&naive_conv(&x, &w, s, p, groups)) <= 1e-10);
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut r = rng(5);
    let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 1, 3, 3], 1.0, &mut r);
    let m = Tensor::randn(&[4, 3], 1.0, &mut r);
    let errs = relative_errors(&[x, w, m], 1e-3, |_, v| {
        let y = v[0].conv2d(v[1], 1, 1, 2)?;
        let pooled = y.reshape(&[2, 4, 25])?.sum(2, false)?;
        let z = pooled.matmul(v[2])?;
        let a = z.mul(z)?.add_scalar(1.0).powf(0.5);
        let b = z.softmax()?.l2norm(1, false)?;
        let c = z.max(1, false)?;
        a.sum_all().add(b.sum_all())?.add(c.sum_all())?.add(z.permute(&[1, 0])?.transpose()?.sum_all())
    })
    .unwrap();
    assert!(errs.iter().all(|&e| e <= 1e-4), "{errs:?}");
}

#[test]
fn graph_is_deterministic() {
    let run = || {
        let mut r = rng(9);
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut r));
        let w = g.leaf(Tensor::randn(&[4, 5], 1.0, &mut r));
        let y = x.matmul(w).unwrap().softmax().unwrap();
        let loss = y.mul(y).unwrap().sum_all();
        let gr = g.backward(loss).unwrap();
        (y.to_tensor(), gr.get(x), gr.get(w))
    };
    assert_eq!(run(), run());
}

fn shape_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((1usize..4, prop::bool::ANY, prop::bool::ANY), 1..4).prop_map(|axes| {
        let a = axes.iter().map(|&(n, ka, _)| if ka { n } else { 1 }).collect();
        let b = axes.iter().map(|&(n, _, kb)| if kb { n } else { 1 }).collect();
        (a, b)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_shape_is_axiswise_max((a, b) in shape_strategy()) {
        let g = Graph::<f64>::new();
        let out = g.constant(Tensor::zeros(&a)).add(g.constant(Tensor::zeros(&b))).unwrap().shape();
        let expect: Vec<usize> = a.iter().zip(&b).map(|(&x, &y)| x.max(y)).collect();
        prop_assert_eq!(out, expect);
    }

    #[test]
    fn binary_ops_match_finite_differences(seed in 0u64..1000, (a, b) in shape_strategy()) {
        let mut r = rng(seed);
        let x = Tensor::randn(&a, 1.0, &mut r);
        let y: Tensor = Tensor::randn(&b, 1.0, &mut r);
        let y = y.map(|v| v.abs() + 0.5);
        let errs = relative_errors(&[x, y], 1e-3, |_, v| {
            let s = v[0].add(v[1])?.mul(v[0].sub(v[1])?)?;
            Ok(s.div(v[1])?.sum_all())
        }).unwrap();
        prop_assert!(errs.iter().all(|&e| e <= 1e-4), "{:?}", errs);
    }
}
