use bbdm_tensor::{attention, attention_weights, grad_check, grad_check_with, Coords, Stencil, Graph, Rng, Tensor, TensorError, Var};

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), &mut Rng::new(seed))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Direct six-nested-loop convolution, stride 1, zero padding.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (h + 2 * pad + 1 - kh, wd + 2 * pad + 1 - kw);
    let mut out = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = oy as isize + ki as isize - pad as isize;
                                let ix = ox as isize + kj as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[s, ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ki, kj]);
                                }
                            }
                        }
                    }
                    out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn elementwise_examples() {
    let g = Graph::<f64>::new();
    let a = g.constant(t64(&[2], &[1.0, 2.0]));
    let b = g.constant(t64(&[2], &[3.0, 4.0]));
    assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    assert_eq!(a.sub(b).unwrap().value().data(), &[-2.0, -2.0]);
    assert_eq!(a.mul(b).unwrap().value().data(), &[3.0, 8.0]);
    assert_eq!(a.scale(0.5).unwrap().value().data(), &[0.5, 1.0]);
    assert_eq!(a.add_scalar(1.0).unwrap().value().data(), &[2.0, 3.0]);

    let s = g.constant(t64(&[2], &[0.0, 1.0])).silu().unwrap().value();
    assert_eq!(s.data()[0], 0.0);
    // 1 / (1 + e^-1) to 16 digits.
    assert!((s.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
}

#[test]
fn elementwise_errors() {
    let g = Graph::<f64>::new();
    let a = g.constant(t64(&[2], &[1.0, 2.0]));
    let c = g.constant(t64(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(a.add(c), Err(TensorError::ShapeMismatch { .. })));
    let big = g.constant(t64(&[1], &[f64::MAX]));
    assert!(matches!(big.add(big), Err(TensorError::NonFinite { op: "add" })));
}

#[test]
fn conv_identity_kernel() {
    let g = Graph::<f64>::new();
    let x = randn(&[2, 3, 5, 4], 1);
    let mut w = Tensor::zeros(vec![3, 3, 3, 3]);
    for c in 0..3 {
        let off = w.offset(&[c, c, 1, 1]);
        w.data_mut()[off] = 1.0;
    }
    let y = g
        .constant(x.clone())
        .conv2d(g.constant(w), Some(g.constant(Tensor::zeros(vec![3]))), 1)
        .unwrap();
    assert_eq!(y.value(), x);
}

#[test]
fn conv_pointwise_affine() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![1, 1, 4, 4], 3.0));
    let w = g.constant(Tensor::full(vec![1, 1, 1, 1], 2.0));
    let b = g.constant(Tensor::full(vec![1], 1.0));
    let y = x.conv2d(w, Some(b), 0).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 7.0));
}

#[test]
fn conv_matches_loop_reference() {
    for (seed, pad) in [(3, 1), (4, 0), (5, 1)] {
        let x = randn(&[2, 3, 6, 5], seed);
        let w = randn(&[4, 3, 3, 3], seed + 100);
        let b = randn(&[4], seed + 200);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), pad).unwrap();
        assert_close(y.value().data(), &conv_reference(&x, &w, &b, pad), 1e-12);
    }
    let x = randn(&[1, 5, 3, 3], 9);
    let w = randn(&[2, 5, 1, 1], 10);
    let b = randn(&[2], 11);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), 0).unwrap();
    assert_close(y.value().data(), &conv_reference(&x, &w, &b, 0), 1e-12);
}

#[test]
fn conv_errors() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w5 = g.constant(Tensor::zeros(vec![1, 2, 5, 5]));
    assert!(matches!(x.conv2d(w5, None, 1), Err(TensorError::UnsupportedKernel(5, 5))));
    let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    assert!(matches!(x.conv2d(w, None, 1), Err(TensorError::ChannelMismatch { expected: 3, got: 2, .. })));
}

#[test]
fn bilinear_examples() {
    let g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(vec![1, 2, 3, 5], 0.7));
    for (h, w) in [(1, 1), (4, 9), (2, 2), (7, 3)] {
        let y = c.bilinear_resize(h, w).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
    let row = g.constant(t64(&[1, 1, 1, 2], &[0.0, 1.0]));
    let y = row.bilinear_resize(1, 4).unwrap().value();
    assert_close(y.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], 1e-15);
    assert!(g.constant(Tensor::zeros(vec![1, 1, 0, 2])).bilinear_resize(2, 2).is_err());
    assert!(row.bilinear_resize(0, 2).is_err());
}

#[test]
fn bilinear_downscale_gradient() {
    let x = randn(&[1, 2, 7, 6], 21);
    let weights = randn(&[1, 2, 3, 4], 22);
    let report = grad_check(
        |g, p| {
            let y = p[0].bilinear_resize(3, 4)?;
            y.mul(g.constant(weights.clone()))?.sum()
        },
        &[x],
        Coords::All,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

/// softmax(Q K^T / sqrt(d)) V with explicit loops.
fn attention_reference(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let (n, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (tk, dv) = (k.shape()[1], v.shape()[2]);
    let mut out = vec![0.0; n * tq * dv];
    for b in 0..n {
        for i in 0..tq {
            let scores: Vec<f64> = (0..tk)
                .map(|j| (0..d).map(|e| q.at(&[b, i, e]) * k.at(&[b, j, e])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for e in 0..dv {
                out[(b * tq + i) * dv + e] = (0..tk).map(|j| scores[j].exp() / z * v.at(&[b, j, e])).sum();
            }
        }
    }
    out
}

#[test]
fn attention_examples() {
    let g = Graph::<f64>::new();
    let v = randn(&[2, 1, 5], 30);
    let single = attention(g.constant(randn(&[2, 1, 5], 31)), g.constant(randn(&[2, 1, 5], 32)), g.constant(v.clone())).unwrap();
    assert_eq!(single.value(), v);

    let k_row = randn(&[1, 1, 4], 33).into_vec();
    let k = t64(&[1, 3, 4], &k_row.repeat(3));
    let v = randn(&[1, 3, 2], 34);
    let out = attention(g.constant(randn(&[1, 2, 4], 35)), g.constant(k), g.constant(v.clone())).unwrap().value();
    for i in 0..2 {
        for e in 0..2 {
            let mean = (0..3).map(|j| v.at(&[0, j, e])).sum::<f64>() / 3.0;
            assert!((out.at(&[0, i, e]) - mean).abs() < 1e-12);
        }
    }

    let (q, k, v) = (randn(&[2, 3, 4], 36), randn(&[2, 3, 4], 37), randn(&[2, 3, 5], 38));
    let out = attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())).unwrap();
    assert_close(out.value().data(), &attention_reference(&q, &k, &v), 1e-12);

    let bad = g.constant(randn(&[2, 3, 3], 39));
    assert!(attention(g.constant(q), bad, g.constant(v)).is_err());
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in 0..10 {
        let q = randn(&[2, 6, 4], seed).map(|v| v * 3.0);
        let k = randn(&[2, 5, 4], seed + 50).map(|v| v * 3.0);
        let p = attention_weights(&q, &k).unwrap();
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_examples() {
    let g = Graph::<f64>::new();
    let w = g.param(t64(&[3], &[0.5, -1.0, 2.0]));
    let x = g.constant(t64(&[3], &[4.0, 5.0, 6.0]));
    let grads = g.backward(w.mul(x).unwrap().sum().unwrap()).unwrap();
    assert_eq!(grads.get(&w).unwrap().data(), &[4.0, 5.0, 6.0]);
    assert!(grads.get(&x).is_none());

    let g = Graph::<f64>::new();
    let w = g.param(t64(&[2], &[1.0, 2.0]));
    let grads = g.backward(w.square().unwrap().sum().unwrap()).unwrap();
    assert_eq!(grads.get(&w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_errors() {
    let g = Graph::<f64>::new();
    let c = g.constant(t64(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(c.sum().unwrap()), Err(TensorError::Disconnected)));
    let w = g.param(t64(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(w), Err(TensorError::NotScalar(_))));
}

#[test]
fn graph_reset_clears_nodes() {
    let mut g = Graph::<f32>::new();
    {
        let a = g.param(Tensor::full(vec![2], 1.0));
        let _ = a.sum().unwrap();
    }
    assert_eq!(g.len(), 2);
    g.reset();
    assert!(g.is_empty());
}

#[test]
fn grad_check_examples() {
    let p = randn(&[4, 3], 40);
    let sum = grad_check(|_, p| p[0].sum(), &[p.clone()], Coords::All, 1e-5).unwrap();
    assert!(sum.max_rel_err < 1e-9, "{sum:?}");
    let cube = grad_check(|_, p| p[0].mul(p[0])?.mul(p[0])?.sum(), &[p.clone()], Coords::All, 1e-5).unwrap();
    assert!(cube.max_rel_err < 1e-6, "{cube:?}");
    assert_eq!(cube.checked, 12);
    let sampled = grad_check(|_, p| p[0].sum(), &[p], Coords::Sampled { per_tensor: 3, seed: 1 }, 1e-5).unwrap();
    assert_eq!(sampled.checked, 3);
}

#[test]
fn four_point_stencil_is_exact_on_cubics() {
    // The two-point error on x^3 is h^2 exactly; the four-point one vanishes.
    let p = randn(&[6], 41);
    fn cube<'g>(_: &'g Graph<f64>, p: &[Var<'g, f64>]) -> bbdm_tensor::Result<Var<'g, f64>> {
        p[0].mul(p[0])?.mul(p[0])?.sum()
    }
    let two = grad_check_with(cube, &[p.clone()], Coords::All, 0.1, Stencil::TwoPoint).unwrap();
    let four = grad_check_with(cube, &[p.clone()], Coords::All, 0.1, Stencil::FourPoint).unwrap();
    assert!(two.max_rel_err > 1e-3);
    assert!(four.max_rel_err < 1e-12, "{four:?}");
    let refined = grad_check_with(cube, &[p.clone()], Coords::All, 0.1, Stencil::Refined { tol: 1e-3, wide: 0.1 }).unwrap();
    assert!(refined.max_rel_err < 1e-12, "{refined:?}");
    // A term hidden from autodiff makes the gradient wrong; refinement must not mask it.
    fn wrong<'g>(g: &'g Graph<f64>, p: &[Var<'g, f64>]) -> bbdm_tensor::Result<Var<'g, f64>> {
        p[0].mul(p[0])?.mul(p[0])?.sum()?.add(g.constant(p[0].value()).sum()?)
    }
    let bad = grad_check_with(wrong, &[p], Coords::All, 1e-5, Stencil::Refined { tol: 1e-4, wide: 1e-3 }).unwrap();
    assert!(bad.max_rel_err > 1e-2, "{bad:?}");
}

#[test]
fn grad_check_detects_nondeterminism() {
    let counter = std::cell::Cell::new(0.0);
    let result = grad_check(
        |_, p| {
            counter.set(counter.get() + 1.0);
            p[0].sum()?.add_scalar(counter.get())
        },
        &[randn(&[2], 1)],
        Coords::All,
        1e-5,
    );
    assert!(matches!(result, Err(TensorError::NonDeterministic { .. })));
}

#[test]
fn rng_same_seed_bitwise() {
    let a = Tensor::<f32>::randn(vec![64], &mut Rng::new(5));
    let b = Tensor::<f32>::randn(vec![64], &mut Rng::new(5));
    assert_eq!(a, b);
    let c = Tensor::<f32>::randn(vec![64], &mut Rng::new(6));
    assert_ne!(a, c);
}

fn check_fd<F>(f: F, params: Vec<Tensor<f64>>)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> bbdm_tensor::Result<Var<'g, f64>>,
{
    let report = grad_check(f, &params, Coords::All, 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

/// Every differentiable op agrees with central differences on random inputs.
#[test]
fn finite_difference_property_over_seeds() {
    for seed in 0..10u64 {
        let s = seed * 1000;
        let w = randn(&[3, 2, 4, 4], s + 1);
        check_fd(
            |g, p| p[0].add(p[1])?.mul(p[0])?.sub(p[1])?.silu()?.scale(0.7)?.add_scalar(0.2)?.mul(g.constant(w.clone()))?.sum(),
            vec![randn(&[3, 2, 4, 4], s + 2), randn(&[3, 2, 4, 4], s + 3)],
        );
        check_fd(
            |_, p| p[0].conv2d(p[1], Some(p[2]), 1)?.square()?.mean(),
            vec![randn(&[2, 3, 5, 4], s + 4), randn(&[2, 3, 3, 3], s + 5), randn(&[2], s + 6)],
        );
        check_fd(
            |_, p| p[0].conv2d(p[1], Some(p[2]), 0)?.silu()?.sum(),
            vec![randn(&[2, 3, 4, 4], s + 7), randn(&[5, 3, 1, 1], s + 8), randn(&[5], s + 9)],
        );
        check_fd(
            |_, p| p[0].linear(p[1], Some(p[2]))?.silu()?.sum(),
            vec![randn(&[3, 4], s + 10), randn(&[2, 4], s + 11), randn(&[2], s + 12)],
        );
        check_fd(
            |g, p| {
                let y = p[0].group_norm(p[1], p[2], 2, 1e-5)?;
                y.mul(g.constant(w.clone()))?.sum()
            },
            vec![randn(&[3, 2, 4, 4], s + 13), randn(&[2], s + 14), randn(&[2], s + 15)],
        );
        check_fd(
            |g, p| {
                let wv = g.constant(randn(&[2, 3, 4], s + 16));
                attention(p[0], p[1], p[2])?.mul(wv)?.sum()
            },
            vec![randn(&[2, 3, 5], s + 17), randn(&[2, 4, 5], s + 18), randn(&[2, 4, 4], s + 19)],
        );
        check_fd(
            |g, p| {
                let pooled = p[0].avg_pool2()?.upsample2()?;
                pooled.mul(g.constant(randn(&[1, 2, 4, 6], s + 20)))?.sum()
            },
            vec![randn(&[1, 2, 4, 6], s + 21)],
        );
        check_fd(
            |g, p| {
                let cat = p[0].concat_channels(p[1])?.channel_shift(p[2])?;
                let tokens = cat.to_tokens()?.from_tokens(3, 2)?.reshape(vec![2, 30])?;
                tokens.mul(g.constant(randn(&[2, 30], s + 22)))?.sum()
            },
            vec![randn(&[2, 2, 3, 2], s + 23), randn(&[2, 3, 3, 2], s + 24), randn(&[2, 5], s + 25)],
        );
        check_fd(
            |g, p| p[0].bilinear_resize(5, 3)?.mul(g.constant(randn(&[1, 1, 5, 3], s + 26)))?.sum(),
            vec![randn(&[1, 1, 3, 4], s + 27)],
        );
    }
}
