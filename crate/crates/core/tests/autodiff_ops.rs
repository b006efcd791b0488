use protokd::autodiff::gradcheck::{check_gradients, GradCheckConfig};
use protokd::{Error, Graph, Mode, Rng, Tensor, Var};

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [b, ci, h, w] = x.shape().try_into().unwrap();
    let [co, _, kh, kw] = k.shape().try_into().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((n * ci + c) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((n * co + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv2d_sum_of_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = Rng::new(1);
    let input = rand_tensor(&[2, 1, 4, 5], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = Rng::new(2);
    let input = rand_tensor(&[1, 2, 5, 5], &mut rng);
    let kernel = rand_tensor(&[3, 2, 3, 3], &mut rng);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let k = g.constant(kernel.clone());
        let y = g.conv2d(x, k, stride, pad).unwrap();
        let want = naive_conv(&input, &kernel, stride, pad);
        let expect_side = (5 + 2 * pad - 3) / stride + 1;
        assert_eq!(g.value(y).shape(), &[1, 3, expect_side, expect_side]);
        assert_close(g.value(y).data(), &want, 1e-6);
    }
}

#[test]
fn conv2d_shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Shape { .. })));
    let k = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Shape { .. })));
    assert!(g.conv2d(x, k, 1, 1).is_ok());
}

#[test]
fn linear_cases() {
    let mut rng = Rng::new(3);
    let input = rand_tensor(&[2, 3], &mut rng);
    let mut eye = vec![0.0; 9];
    (0..3).for_each(|i| eye[i * 4] = 1.0);

    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(Tensor::from_f64(&[3, 3], &eye).unwrap());
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &input);

    let w0 = g.constant(Tensor::zeros(&[4, 3]));
    let bias = Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
    let b4 = g.constant(bias.clone());
    let y = g.linear(x, w0, Some(b4)).unwrap();
    for r in 0..2 {
        assert_eq!(g.value(y).row(r), bias.data());
    }

    let weight = rand_tensor(&[4, 3], &mut rng);
    let wv = g.constant(weight.clone());
    let y = g.linear(x, wv, None).unwrap();
    let mut want = vec![0.0; 8];
    for i in 0..2 {
        for o in 0..4 {
            want[i * 4 + o] = (0..3)
                .map(|k| input.data()[i * 3 + k] * weight.data()[o * 3 + k])
                .sum();
        }
    }
    assert_close(g.value(y).data(), &want, 1e-6);

    let bad = g.constant(Tensor::zeros(&[4, 2]));
    assert!(g.linear(x, bad, None).is_err());
}

#[test]
fn log_softmax_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
    let y = g.log_softmax(x).unwrap();
    assert_close(g.value(y).data(), &[0.5f64.ln(), 0.5f64.ln()], 1e-12);

    let x = g.constant(Tensor::from_f64(&[1, 2], &[0.0, -1.0]).unwrap());
    let y = g.log_softmax(x).unwrap();
    let first = (1.0 / (1.0 + (-1.0f64).exp())).ln();
    assert!((g.value(y).data()[0] - first).abs() < 1e-12);
    assert!((g.value(y).data()[0] - -0.3133).abs() < 1e-4);

    let mut rng = Rng::new(4);
    let base = rand_tensor(&[5, 7], &mut rng);
    let shifted = base.map(|v| v + 123.25);
    let a = g.constant(base);
    let b = g.constant(shifted);
    let (la, lb) = (g.log_softmax(a).unwrap(), g.log_softmax(b).unwrap());
    assert_close(g.value(la).data(), g.value(lb).data(), 1e-9);
    for row in g.value(la).data().chunks(7) {
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn log_softmax_rows_sum_to_one_in_f32() {
    let mut rng = Rng::new(5);
    let data: Vec<f32> = (0..40).map(|_| rng.uniform(-20.0, 20.0) as f32).collect();
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[4, 10], data).unwrap());
    let y = g.log_softmax(x).unwrap();
    for row in g.value(y).data().chunks(10) {
        let s: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn pairwise_sq_euclidean_cases() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap());
    let d = g.pairwise_sq_euclidean(a, b).unwrap();
    assert_eq!(g.value(d).data(), &[25.0]);

    let mut rng = Rng::new(6);
    let ta = rand_tensor(&[4, 8], &mut rng);
    let tb = rand_tensor(&[3, 8], &mut rng);
    let (a, b) = (g.constant(ta.clone()), g.constant(tb.clone()));
    let d = g.pairwise_sq_euclidean(a, b).unwrap();
    let mut want = Vec::new();
    for i in 0..4 {
        for j in 0..3 {
            want.push(
                (0..8)
                    .map(|k| (ta.row(i)[k] - tb.row(j)[k]).powi(2))
                    .sum::<f64>(),
            );
        }
    }
    assert_close(g.value(d).data(), &want, 1e-6);
    assert!(g.value(d).data().iter().all(|&v| v >= 0.0));

    let self_d = g.pairwise_sq_euclidean(a, a).unwrap();
    for i in 0..4 {
        assert_eq!(g.value(self_d).data()[i * 4 + i], 0.0);
    }
    let c = g.constant(Tensor::zeros(&[2, 7]));
    assert!(g.pairwise_sq_euclidean(a, c).is_err());
}

#[test]
fn l2_normalize_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap());
    let y = g.l2_normalize(x).unwrap();
    assert_close(g.value(y).data(), &[0.6, 0.8], 1e-12);

    let unit = Tensor::from_f64(&[1, 3], &[0.0, 1.0, 0.0]).unwrap();
    let u = g.constant(unit.clone());
    let y = g.l2_normalize(u).unwrap();
    assert_eq!(g.value(y), &unit);

    let mut rng = Rng::new(7);
    let x = g.constant(rand_tensor(&[5, 16], &mut rng));
    let y = g.l2_normalize(x).unwrap();
    for row in g.value(y).data().chunks(16) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    let z = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap());
    assert!(matches!(g.l2_normalize(z), Err(Error::Degenerate { .. })));
}

#[test]
fn backward_trivial_cases() {
    let mut rng = Rng::new(8);
    let t = rand_tensor(&[3, 4], &mut rng);

    let mut g = Graph::new();
    let x = g.param(t.clone());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(t.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    g.backward(half).unwrap();
    assert_close(g.grad(x).unwrap().data(), t.data(), 1e-15);
}

#[test]
fn backward_error_paths() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    assert!(matches!(g.backward(x), Err(Error::Backward(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn unreachable_leaves_have_no_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    let unused = g.param(Tensor::full(&[2], 1.0));
    let c = g.constant(Tensor::full(&[2], 2.0));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).is_some());
    assert!(g.grad(unused).is_none());
    assert!(g.grad(c).is_none());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
    assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
    let big = g.constant(Tensor::from_f64(&[1], &[1000.0]).unwrap());
    assert!(matches!(g.exp(big), Err(Error::NonFinite { .. })));
}

fn gc(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> protokd::Result<Var>) {
    let diff = vec![true; inputs.len()];
    let report = check_gradients(inputs, &diff, GradCheckConfig::default(), f).unwrap();
    assert!(report.passed(), "{:?}", report.mismatches);
    assert!(report.checked > 0);
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> protokd::Result<Var> {
    let mut rng = Rng::new(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_tensor(&shape, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = Rng::new(10);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng);
    gc(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let sc = g.scale(m, -1.7)?;
        let y = g.add_scalar(sc, 0.3)?;
        probe(g, y, 1)
    });
    gc(&[a.clone(), rand_tensor(&[4, 5], &mut rng)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let t = g.transpose(y)?;
        probe(g, t, 2)
    });
    gc(
        &[
            a.clone(),
            rand_tensor(&[2, 4], &mut rng),
            rand_tensor(&[2], &mut rng),
        ],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y, 3)
        },
    );
    gc(
        &[
            rand_tensor(&[2, 2, 5, 5], &mut rng),
            rand_tensor(&[3, 2, 3, 3], &mut rng),
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            probe(g, y, 4)
        },
    );
    gc(
        &[
            rand_tensor(&[2, 3, 4, 4], &mut rng),
            rand_tensor(&[2, 3, 1, 1], &mut rng),
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 0)?;
            probe(g, y, 5)
        },
    );
    gc(
        &[
            rand_tensor(&[2, 4, 3, 3], &mut rng),
            rand_tensor(&[4], &mut rng),
            rand_tensor(&[4], &mut rng),
        ],
        |g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 2)?;
            probe(g, y, 6)
        },
    );
    gc(&[rand_tensor(&[2, 3, 2, 2], &mut rng)], |g, v| {
        let y = g.mean_pool(v[0])?;
        probe(g, y, 7)
    });
    gc(std::slice::from_ref(&a), |g, v| {
        let y = g.log_softmax(v[0])?;
        probe(g, y, 8)
    });
    let positive = a.map(|x| x.abs() + 0.5);
    gc(&[positive], |g, v| {
        let e = g.exp(v[0])?;
        let l = g.log(v[0])?;
        let s = g.sqrt(v[0])?;
        let t = g.add(e, l)?;
        let y = g.add(t, s)?;
        probe(g, y, 9)
    });
    gc(std::slice::from_ref(&a), |g, v| {
        let y = g.mean(v[0])?;
        let z = g.sum(v[0])?;
        let y = g.mul(y, z)?;
        probe(g, y, 10)
    });
    gc(
        &[
            rand_tensor(&[4, 3], &mut rng),
            rand_tensor(&[2, 3], &mut rng),
        ],
        |g, v| {
            let y = g.pairwise_sq_euclidean(v[0], v[1])?;
            probe(g, y, 11)
        },
    );
    gc(std::slice::from_ref(&a), |g, v| {
        let y = g.l2_normalize(v[0])?;
        probe(g, y, 12)
    });
    gc(std::slice::from_ref(&a), |g, v| {
        let y = g.pick(v[0], &[3, 0, 2])?;
        probe(g, y, 13)
    });
    let mask = vec![
        true, false, true, true, false, true, true, true, true, true, true, false,
    ];
    gc(std::slice::from_ref(&a), move |g, v| {
        let y = g.masked_logsumexp(v[0], &mask)?;
        probe(g, y, 14)
    });
    gc(&[rand_tensor(&[5, 3], &mut rng)], |g, v| {
        let y = g.segment_mean(v[0], &[1, 0, 1, 2, 1], 3)?;
        probe(g, y, 15)
    });
    gc(&[rand_tensor(&[4, 2, 2], &mut rng)], |g, v| {
        let y = g.select_rows(v[0], &[3, 1, 3])?;
        probe(g, y, 16)
    });
    // ReLU away from the kink.
    let away = a.map(|x| if x.abs() < 0.05 { 0.3 } else { x });
    gc(&[away], |g, v| {
        let y = g.relu(v[0])?;
        probe(g, y, 17)
    });
}

#[test]
fn dropout_masks_and_rescales() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[1000], 1.0));
    let mut rng = Rng::new(11);
    assert_eq!(g.dropout(x, 0.3, Mode::Eval, &mut rng).unwrap(), x);
    let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    let vals = g.value(y).data().to_vec();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let kept = vals.iter().filter(|&&v| v > 0.0).count();
    assert!((400..600).contains(&kept), "{kept}");
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &vals[..]);
}

/// conv -> relu -> linear -> log_softmax -> NLL on an 8-d toy input.
#[test]
fn composite_pipeline_matches_finite_differences() {
    let mut rng = Rng::new(12);
    let input = rand_tensor(&[2, 2, 2, 2], &mut rng); // 8 values per sample
    let kernel = rand_tensor(&[3, 2, 2, 2], &mut rng);
    let weight = rand_tensor(&[4, 3], &mut rng);
    let bias = rand_tensor(&[4], &mut rng);
    let report = check_gradients(
        &[input, kernel, weight, bias],
        &[true, true, true, true],
        GradCheckConfig {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
        },
        |g, v| {
            let c = g.conv2d(v[0], v[1], 1, 0)?; // [2, 3, 1, 1]
            let r = g.relu(c)?;
            let r = g.mean_pool(r)?; // [2, 3]
            let l = g.linear(r, v[2], Some(v[3]))?;
            let lp = g.log_softmax(l)?;
            let picked = g.pick(lp, &[1, 3])?;
            let m = g.mean(picked)?;
            g.neg(m)
        },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.mismatches);
}

#[test]
fn identical_graphs_are_bit_identical() {
    let run = || {
        let mut rng = Rng::new(13);
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 3 * 6 * 6)
            .map(|_| rng.uniform(0.0, 1.0) as f32)
            .collect();
        let x = g.constant(Tensor::new(&[2, 3, 6, 6], data).unwrap());
        let kd: Vec<f32> = (0..4 * 3 * 9).map(|_| rng.normal() as f32).collect();
        let k = g.param(Tensor::new(&[4, 3, 3, 3], kd).unwrap());
        let y = g.conv2d(x, k, 1, 1).unwrap();
        let y = g.dropout(y, 0.3, Mode::Train, &mut rng).unwrap();
        let s = g.mean(y).unwrap();
        g.backward(s).unwrap();
        (g.value(s).clone(), g.grad(k).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    assert!(ga
        .data()
        .iter()
        .zip(gb.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}
