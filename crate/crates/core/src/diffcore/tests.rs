use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::MartError;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of a plain function, independent of the graph.
fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
    let mut w = x.clone();
    (0..x.len())
        .map(|i| {
            let o = w.data()[i];
            w.data_mut()[i] = o + h;
            let up = f(&w);
            w.data_mut()[i] = o - h;
            let dn = f(&w);
            w.data_mut()[i] = o;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

#[test]
fn matmul_identity_and_dot() {
    let g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    assert_eq!(i2.matmul(&a).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let c = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a0 = rand_tensor(&mut rng, &[3, 4]);
    let b0 = rand_tensor(&mut rng, &[4, 2]);
    let g = Graph::new();
    let a = g.param(a0.clone());
    let b = g.constant(b0.clone());
    let y = a.matmul(&b).unwrap().sum();
    let grads = g.backward(y).unwrap();
    let fd = numeric_grad(
        |a| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..2 {
                    for k in 0..4 {
                        s += a.data()[i * 4 + k] * b0.data()[k * 2 + j];
                    }
                }
            }
            s
        },
        &a0,
        1e-5,
    );
    for (x, y) in grads.get(a).unwrap().data().iter().zip(&fd) {
        assert!((x - y).abs() < 1e-8);
    }
    // d sum(AB)/dA[i,k] = sum_j B[k,j], the same for every row.
    let row_sums: Vec<f64> = (0..4).map(|k| b0.data()[2 * k] + b0.data()[2 * k + 1]).collect();
    for i in 0..3 {
        for k in 0..4 {
            assert!((grads.get(a).unwrap().data()[i * 4 + k] - row_sums[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let s = |v: Vec<f64>| g.constant(Tensor::vector(v)).softmax().unwrap().value().data().to_vec();
    assert_eq!(s(vec![0.0, 0.0]), vec![0.5, 0.5]);
    assert_eq!(s(vec![1000.0, 1000.0]), vec![0.5, 0.5]);
    let p = s(vec![0.0, 3f64.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(x.softmax().unwrap_err(), MartError::Domain(_)));
}

#[test]
fn elementwise_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
    assert_eq!(x.relu().value().data(), &[0.0, 2.0]);

    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = x.mul(&x).unwrap().sum();
    let gr = g.backward(y).unwrap();
    assert_eq!(gr.get(x).unwrap().data(), &[2.0, 4.0]);

    let p = g.constant(Tensor::vector(vec![0.1, 1.0, 7.5, 123.0]));
    let back = p.log().unwrap().exp();
    for (a, b) in back.value().data().iter().zip(p.value().data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(x.log().unwrap_err(), MartError::Domain(_)));
    let x = g.constant(Tensor::vector(vec![-3.0]));
    assert!(matches!(x.log().unwrap_err(), MartError::Domain(_)));
}

#[test]
fn cosine_examples() {
    let g = Graph::<f64>::new();
    let v = |d: Vec<f64>| g.constant(Tensor::vector(d));
    let a = v(vec![0.3, -2.0, 5.0]);
    assert!((a.cosine_sim(&a).unwrap().value().item() - 1.0).abs() < 1e-12);
    assert_eq!(v(vec![1.0, 0.0]).cosine_sim(&v(vec![0.0, 1.0])).unwrap().value().item(), 0.0);
    let s = v(vec![1.0, 1.0]).cosine_sim(&v(vec![1.0, 0.0])).unwrap().value().item();
    assert!((s - 0.7071).abs() < 1e-4 && (s - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    let err = v(vec![0.0, 0.0]).cosine_sim(&v(vec![1.0, 0.0])).unwrap_err();
    assert!(matches!(err, MartError::DegenerateVector(_)));
}

/// Direct six-loop convolution over a single image.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, c: usize, h: usize, w: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += x.data()[(ic * h + sy as usize) * w + sx as usize]
                                * k.data()[((oc * c + ic) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_examples() {
    let g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let zero = g.constant(Tensor::zeros(vec![1, 4, 4]));
    let kv = g.constant(k.clone());
    assert!(zero.conv2d(&kv).unwrap().value().data().iter().all(|&v| v == 0.0));

    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let mut delta = Tensor::zeros(vec![1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    let id = g.constant(x.clone()).conv2d(&g.constant(delta)).unwrap();
    assert_eq!(id.value().data(), x.data());

    let out = g.constant(x.clone()).conv2d(&kv).unwrap();
    let oracle = naive_conv(&x, &k, 1, 4, 4, 2);
    for (a, b) in out.value().data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(out.shape(), vec![2, 4, 4]);
}

#[test]
fn conv2d_multi_channel_batch_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, c, h, w, o) = (2, 3, 5, 6, 4);
    let x = rand_tensor(&mut rng, &[b, c, h, w]);
    let k = rand_tensor(&mut rng, &[o, c, 3, 3]);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv2d(&g.constant(k.clone())).unwrap().value();
    for bi in 0..b {
        let img = Tensor::new(vec![c, h, w], x.data()[bi * c * h * w..(bi + 1) * c * h * w].to_vec()).unwrap();
        let want = naive_conv(&img, &k, c, h, w, o);
        let got = &y.data()[bi * o * h * w..(bi + 1) * o * h * w];
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_channel_mismatch() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![2, 4, 4]));
    let k = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    assert!(matches!(x.conv2d(&k).unwrap_err(), MartError::Dimension(_)));
}

#[test]
fn maxpool_forward_backward() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = x.maxpool2d((2, 2)).unwrap();
    assert_eq!(y.value().data(), &[4.0]);
    let gr = g.backward(y.sum()).unwrap();
    assert_eq!(gr.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

    // Finite-difference oracle on a random map without ties.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_tensor(&mut rng, &[1, 4, 4]);
    let w0 = rand_tensor(&mut rng, &[1, 2, 2]);
    let g = Graph::new();
    let x = g.param(x0.clone());
    let y = x.maxpool2d((2, 2)).unwrap().mul(&g.constant(w0.clone())).unwrap().sum();
    let gr = g.backward(y).unwrap();
    let fd = numeric_grad(
        |x| {
            let mut s = 0.0;
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[(oy * 2 + dy) * 4 + ox * 2 + dx]);
                        }
                    }
                    s += m * w0.data()[oy * 2 + ox];
                }
            }
            s
        },
        &x0,
        1e-6,
    );
    for (a, b) in gr.get(x).unwrap().data().iter().zip(&fd) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn maxpool_window_too_large() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 4]));
    assert!(matches!(x.maxpool2d((2, 2)).unwrap_err(), MartError::Dimension(_)));
}

#[test]
fn batchnorm_constant_input_is_zero_in_train_mode() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::filled(vec![3, 2, 2, 2], 4.25));
    let gamma = g.param(Tensor::filled(vec![2], 1.0));
    let beta = g.param(Tensor::zeros(vec![2]));
    let (y, mean, var) = x.batchnorm_train(&gamma, &beta, 1e-5).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
    assert_eq!(mean, vec![4.25, 4.25]);
    assert_eq!(var, vec![0.0, 0.0]);
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
    let gamma = g.param(Tensor::filled(vec![1], 2.0));
    let beta = g.param(Tensor::filled(vec![1], 0.5));
    let y = x.batchnorm_eval(&gamma, &beta, &[1.0], &[4.0 - 1e-5], 1e-5).unwrap();
    let v = y.value();
    assert!((v.data()[0] - 0.5).abs() < 1e-12);
    assert!((v.data()[1] - 2.5).abs() < 1e-12);
}

#[test]
fn gather_take_reshape_route_gradients() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let r = x.gather_rows(&[2, 0, 2]).unwrap();
    assert_eq!(r.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let t = x.reshape(&[6]).unwrap().take(&[1, 1, 5]).unwrap();
    assert_eq!(t.value().data(), &[2.0, 2.0, 6.0]);
    let y = r.sum().add(&t.sum()).unwrap();
    let gr = g.backward(y).unwrap();
    assert_eq!(gr.get(x).unwrap().data(), &[1.0, 3.0, 0.0, 0.0, 2.0, 3.0]);
}

#[test]
fn concat_rows_stacks_and_splits_gradients() {
    let g = Graph::<f64>::new();
    let a = g.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = g.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = g.concat_rows(&[a, b]).unwrap();
    assert_eq!(c.shape(), vec![3, 2]);
    assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let w = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let gr = g.backward(c.mul(&w).unwrap().sum()).unwrap();
    assert_eq!(gr.get(a).unwrap().data(), &[1.0, 2.0]);
    assert_eq!(gr.get(b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    let bad = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
    assert!(g.concat_rows(&[a, bad]).is_err());
}

#[test]
fn backward_requires_scalar() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.backward(x.exp()).is_err());
}

#[test]
fn grad_check_square_sum_passes_tight() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let cfg = GradCheckConfig {
        tolerance: 1e-8,
        ..Default::default()
    };
    let rep = grad_check(|_, v| Ok(v[0].mul(&v[0])?.sum()), &[x], cfg).unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn grad_check_catches_corrupted_backward() {
    // exp with a reverse rule that forgets the chain factor.
    fn bad_exp<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> crate::Result<Var<'g, f64>> {
        let x = v[0];
        let val = x.value().map(f64::exp);
        let bad = x.graph().custom(
            &[x],
            val,
            Box::new(|ins, _out, d| vec![ins[0].map(|_| d.data()[0])]),
        );
        Ok(bad.sum())
    }
    let f = bad_exp;
    let x = Tensor::vector(vec![0.7]);
    let rep = grad_check(f, &[x], GradCheckConfig::default()).unwrap();
    assert!(!rep.passed);
}

#[test]
fn grad_check_aborts_on_non_finite() {
    let x = Tensor::vector(vec![1000.0]);
    let err = grad_check(|_, v| Ok(v[0].exp().exp().sum()), &[x], GradCheckConfig::default()).unwrap_err();
    assert!(matches!(err, MartError::Numeric(_)));
}

#[test]
fn grad_check_sets_aside_kinks() {
    // The first entry sits within h of the ReLU switch point.
    let x = Tensor::vector(vec![3e-6, 0.5, -0.7]);
    let rep = grad_check(|_, v| Ok(v[0].relu().mul(&v[0])?.sum()), &[x], GradCheckConfig::default()).unwrap();
    assert_eq!((rep.kinks, rep.checked), (1, 2));
    assert!(rep.passed, "{rep:?}");
    let near = Tensor::vector(vec![-2e-6]);
    let rep = grad_check(|_, v| Ok(v[0].relu().sum()), &[near], GradCheckConfig::default()).unwrap();
    assert_eq!(rep.checked, 0);
    assert!(!rep.passed);
}

#[test]
fn branch_signature_tracks_pool_winners() {
    let sig = |data: Vec<f64>| {
        let g = Graph::new();
        g.constant(Tensor::new(vec![1, 1, 2, 2], data).unwrap()).maxpool2d((2, 2)).unwrap();
        g.branch_signature()
    };
    assert_eq!(sig(vec![1.0, 2.0, 3.0, 4.0]), sig(vec![0.0, 1.0, 2.0, 9.0]));
    assert_ne!(sig(vec![1.0, 2.0, 3.0, 4.0]), sig(vec![5.0, 2.0, 3.0, 4.0]));
}

/// A composite touching most differentiable ops, used for randomized checks.
fn composite<'g>(g: &'g Graph<f64>, v: &[Var<'g, f64>], rows: usize) -> crate::Result<Var<'g, f64>> {
    let (a, w, bias, img, kern, gamma, beta) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let h = a.matmul(&w)?.add_bias(&bias)?;
    let sm = h.softmax()?;
    let nr = h.normalize_rows()?;
    let cs = nr.gather_rows(&[0])?.reshape(&[nr.shape()[1]])?.cosine_sim(&nr.gather_rows(&[rows - 1])?.reshape(&[nr.shape()[1]])?)?;
    let conv = img.conv2d(&kern)?;
    let (bn, _, _) = conv.batchnorm_train(&gamma, &beta, 1e-5)?;
    let pooled = bn.maxpool2d((2, 2))?.global_avg_pool()?;
    let pos = sm.add(&g.constant(Tensor::filled(sm.shape(), 0.5)))?.log()?;
    let att = h.attention(&h.scale(0.7), &h.exp(), 1, 1)?;
    let total = pos
        .sum_rows()?
        .sum()
        .add(&cs)?
        .add(&pooled.mul(&pooled)?.mean())?
        .add(&att.transpose()?.sub(&h.transpose()?)?.relu().mean())?;
    Ok(total)
}

#[test]
fn randomized_composite_gradients_match_finite_differences() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(2..4);
        let k = rng.random_range(2..4);
        let n = rng.random_range(2..4);
        let params = vec![
            rand_tensor(&mut rng, &[rows, k]),
            rand_tensor(&mut rng, &[k, n]),
            rand_tensor(&mut rng, &[n]),
            rand_tensor(&mut rng, &[2, 1, 4, 4]),
            rand_tensor(&mut rng, &[2, 1, 3, 3]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[2]),
        ];
        let rep = grad_check(|g, v| composite(g, v, rows), &params, GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "seed {seed}: {rep:?}");
    }
}

#[test]
fn attention_gradients_multi_head_grouped() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let params = vec![
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[6, 6]),
        rand_tensor(&mut rng, &[6, 6]),
    ];
    let rep = grad_check(
        |g, v| {
            let w = g.constant(Tensor::new(vec![4, 6], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
            Ok(v[0].attention(&v[1], &v[2], 2, 3)?.mul(&w)?.sum())
        },
        &params,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::vector(row.clone())).softmax().unwrap().value();
        let s: f64 = p.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let q = g.constant(Tensor::vector(shifted)).softmax().unwrap().value();
        prop_assert!(p.max_abs_diff(&q) < 1e-6);
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant(
        u in proptest::collection::vec(-10.0f64..10.0, 4),
        v in proptest::collection::vec(-10.0f64..10.0, 4),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let nu: f64 = u.iter().map(|x| x * x).sum();
        let nv: f64 = v.iter().map(|x| x * x).sum();
        prop_assume!(nu > 1e-6 && nv > 1e-6);
        let g = Graph::<f64>::new();
        let c = |x: &[f64]| g.constant(Tensor::vector(x.to_vec()));
        let s = c(&u).cosine_sim(&c(&v)).unwrap().value().item();
        let t = c(&v).cosine_sim(&c(&u)).unwrap().value().item();
        let us: Vec<f64> = u.iter().map(|x| x * a).collect();
        let vs: Vec<f64> = v.iter().map(|x| x * b).collect();
        let r = c(&us).cosine_sim(&c(&vs)).unwrap().value().item();
        prop_assert!((s - t).abs() < 1e-6);
        prop_assert!((s - r).abs() < 1e-6);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = Graph::<f32>::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 3, 8, 8]).cast());
        let k = g.constant(rand_tensor(&mut rng, &[4, 3, 3, 3]).cast());
        x.conv2d(&k).unwrap().relu().maxpool2d((2, 2)).unwrap().value().data().to_vec()
    };
    assert_eq!(run(), run());
}
