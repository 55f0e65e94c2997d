use vidpriv_tensor::{grad_check, Element, Graph, RngState, Tensor, TensorError, Var};

fn rand_tensor<T: Element>(shape: &[usize], rng: &mut RngState, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_range(lo, hi)))
}

fn binary_mask(n: usize, rng: &mut RngState) -> Tensor<f32> {
    let mut m = Tensor::from_fn(&[n], |_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 });
    m.data_mut()[0] = 1.0;
    m
}

#[test]
fn matmul_with_identity_is_identity() {
    let mut rng = RngState::new(1);
    let g = Graph::<f32>::new();
    let a = g.constant(rand_tensor(&[5, 4], &mut rng, -1.0, 1.0));
    let i = g.constant(Tensor::eye(4));
    let out = a.matmul(i).unwrap();
    assert!(out.value().bit_eq(&a.value()));
}

#[test]
fn softmax_rows_are_distributions_even_for_large_inputs() {
    let mut rng = RngState::new(2);
    let g = Graph::<f32>::new();
    let x = g.constant(rand_tensor(&[32, 9], &mut rng, -50.0, 50.0));
    let y = x.softmax().unwrap().value();
    for row in y.data().chunks(9) {
        assert!(row.iter().all(|&p| p >= 0.0));
        let s: f64 = row.iter().map(|&p| p as f64).sum();
        assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
    }
}

#[test]
fn layer_norm_standardises_before_affine() {
    let mut rng = RngState::new(3);
    let g = Graph::<f32>::new();
    let x = g.constant(rand_tensor(&[16], &mut rng, -3.0, 5.0));
    let y = x
        .layer_norm(g.constant(Tensor::ones(&[16])), g.constant(Tensor::zeros(&[16])), 1e-5)
        .unwrap()
        .value();
    // Independent mean / variance in f64.
    let v: Vec<f64> = y.data().iter().map(|&a| a as f64).collect();
    let mean = v.iter().sum::<f64>() / 16.0;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() <= 1e-5, "mean {mean}");
    assert!((var - 1.0).abs() <= 1e-4, "var {var}");
}

#[test]
fn constant_loss_has_no_gradients() {
    let g = Graph::<f32>::new();
    let c = g.constant(Tensor::ones(&[3, 3]));
    let loss = c.sum_all().unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let g = Graph::<f32>::new();
    let used = g.param("used", &Tensor::ones(&[2]));
    let _unused = g.param("unused", &Tensor::ones(&[3]));
    let loss = used.sum_all().unwrap();
    let grads = g.backward(loss).unwrap().into_named();
    assert_eq!(grads["used"].data(), &[1.0, 1.0]);
    assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn chained_matmul_matches_central_differences() {
    // loss = sum(A B x); oracle differentiates each entry of A numerically.
    let mut rng = RngState::new(4);
    let a0: Tensor<f32> = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b0: Tensor<f32> = rand_tensor(&[4, 5], &mut rng, -1.0, 1.0);
    let x0: Tensor<f32> = rand_tensor(&[5, 2], &mut rng, -1.0, 1.0);
    let loss_at = |a: &Tensor<f32>| -> f64 {
        // Plain loops, no graph.
        let mut total = 0.0f64;
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    for l in 0..5 {
                        total += a.at(&[i, k]) as f64 * b0.at(&[k, l]) as f64 * x0.at(&[l, j]) as f64;
                    }
                }
            }
        }
        total
    };
    let g = Graph::<f32>::new();
    let a = g.param("a", &a0);
    let loss = a
        .matmul(g.constant(b0.clone()))
        .unwrap()
        .matmul(g.constant(x0.clone()))
        .unwrap()
        .sum_all()
        .unwrap();
    let grads = g.backward(loss).unwrap();
    let ga = grads.by_name("a").unwrap();
    let eps = 1e-3;
    let mut worst = 0.0f64;
    let scale = ga.data().iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    for i in 0..a0.numel() {
        let mut p = a0.clone();
        let mut m = a0.clone();
        p.data_mut()[i] += eps;
        m.data_mut()[i] -= eps;
        let fd = (loss_at(&p) - loss_at(&m)) / (p.data()[i] as f64 - m.data()[i] as f64);
        worst = worst.max((fd - ga.data()[i] as f64).abs() / scale);
    }
    assert!(worst <= 1e-3, "relative error {worst}");
}

#[test]
fn gradient_is_linear_in_loss_scale() {
    let mut rng = RngState::new(5);
    let x0: Tensor<f64> = rand_tensor(&[6], &mut rng, -2.0, 2.0);
    let grad_of = |a: f64| {
        let g = Graph::<f64>::new();
        let x = g.param("x", &x0);
        let loss = x.gelu().unwrap().exp().unwrap().sum_all().unwrap().scale(a).unwrap();
        g.backward(loss).unwrap().by_name("x").unwrap().clone()
    };
    let base = grad_of(1.0);
    let scaled = grad_of(-2.5);
    for (b, s) in base.data().iter().zip(scaled.data()) {
        assert!((s - (-2.5 * b)).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn reused_var_accumulates_gradient() {
    let g = Graph::<f64>::new();
    let x = g.param("x", &Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap());
    let loss = x.mul(x).unwrap().sum_all().unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.by_name("x").unwrap().data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn identity_grad_check_is_exact() {
    let point = Tensor::<f64>::from_f64(&[], &[0.37]).unwrap();
    let r = grad_check(|_g, x| Ok::<_, TensorError>(x), &point, 1e-3, 1e-12).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.max_rel_error < 1e-12);
}

fn softmax_sq<'g, T: Element>(_g: &'g Graph<T>, x: Var<'g, T>) -> vidpriv_tensor::Result<Var<'g, T>> {
    let s = x.softmax()?;
    s.mul(s)?.sum_all()
}

#[test]
fn softmax_sum_of_squares_passes_in_both_precisions() {
    let mut rng = RngState::new(6);
    let p32: Tensor<f32> = rand_tensor(&[8], &mut rng, -2.0, 2.0);
    let r32 = grad_check(softmax_sq::<f32>, &p32, 0.1, 1e-3).unwrap();
    assert!(r32.passed, "{r32:?}");
    let p64: Tensor<f64> = p32.cast();
    let r64 = grad_check(softmax_sq::<f64>, &p64, 1e-5, 1e-6).unwrap();
    assert!(r64.passed, "{r64:?}");
}

#[test]
fn masked_mean_with_full_mask_equals_mean_exactly() {
    let mut rng = RngState::new(7);
    let g = Graph::<f32>::new();
    let x = g.constant(rand_tensor(&[5, 7, 3], &mut rng, -4.0, 4.0));
    let ones = g.constant(Tensor::ones(&[5, 7]));
    let a = x.masked_mean(ones, 1).unwrap().value();
    let b = x.mean_axis(1).unwrap().value();
    assert!(a.bit_eq(&b));
}

#[test]
fn masked_mean_with_empty_group_is_zero() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_f64(&[2, 2, 1], &[1.0, 3.0, 5.0, 7.0]).unwrap());
    let m = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap());
    let out = x.masked_mean(m, 1).unwrap().value();
    assert_eq!(out.data(), &[2.0, 0.0]);
}

#[test]
fn error_paths() {
    let g = Graph::<f32>::new();
    let a = g.constant(Tensor::ones(&[2, 3]));
    let b = g.constant(Tensor::ones(&[2, 3]));
    assert!(matches!(a.matmul(b), Err(TensorError::ShapeMismatch { .. })));

    let m = g.constant(Tensor::from_f64(&[2], &[1.0, 0.5]).unwrap());
    assert!(matches!(a.masked_mean(m, 0), Err(TensorError::NonBinaryMask { .. })));

    let z = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(z.log(), Err(TensorError::NonFinite { .. })));

    let loss = a.sum_axis(0).unwrap();
    assert!(matches!(g.backward(loss), Err(TensorError::NonScalarLoss(_))));

    let g2 = Graph::<f32>::new();
    let p = g2.param("p", &Tensor::ones(&[2]));
    let l = p.sum_all().unwrap();
    g2.backward(l).unwrap();
    assert!(matches!(g2.backward(l), Err(TensorError::TapeConsumed)));
}

#[test]
fn grad_check_rejects_nondeterministic_functions() {
    use std::cell::Cell;
    let calls = Cell::new(0u32);
    let p = Tensor::<f64>::ones(&[2]);
    let out = grad_check(
        |_g, x| {
            calls.set(calls.get() + 1);
            x.scale(calls.get() as f64)?.sum_all()
        },
        &p,
        1e-4,
        1e-6,
    );
    assert!(matches!(out, Err(TensorError::NonDeterministic)));
}

#[test]
fn straight_through_forwards_hard_and_backwards_identity() {
    let g = Graph::<f64>::new();
    let soft = g.param("s", &Tensor::from_f64(&[3], &[0.2, 0.7, 0.9]).unwrap());
    let hard = Tensor::from_f64(&[3], &[0.0, 1.0, 1.0]).unwrap();
    let st = soft.straight_through(hard.clone()).unwrap();
    assert!(st.value().bit_eq(&hard));
    let w = g.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let loss = st.mul(w).unwrap().sum_all().unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.by_name("s").unwrap().data(), &[1.0, 2.0, 3.0]);
}

fn weighted_sum<'g>(g: &'g Graph<f32>, y: Var<'g, f32>, seed: u64) -> vidpriv_tensor::Result<Var<'g, f32>> {
    let mut rng = RngState::new(seed);
    let r = g.constant(rand_tensor(&y.shape(), &mut rng, -1.0, 1.0));
    y.mul(r)?.sum_all()
}

type Case = Box<dyn for<'g> Fn(&'g Graph<f32>, Var<'g, f32>, &[usize], u64) -> vidpriv_tensor::Result<Var<'g, f32>>>;

/// One entry per differentiable primitive; the harness wraps each in `sum(op(x) * r)`.
fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 1);
            let b = g.constant(rand_tensor(&[s[1]], &mut r, -1.0, 1.0));
            x.add(b)
        })),
        ("add_bcast_grad", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 2);
            let a = g.constant(rand_tensor(&[s[0], s[1]], &mut r, -1.0, 1.0));
            a.add(x.sum_axis(0)?)
        })),
        ("sub", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 3);
            let a = g.constant(rand_tensor(s, &mut r, -1.0, 1.0));
            a.sub(x)
        })),
        ("mul", Box::new(|_g, x, _s, _| x.mul(x))),
        ("scale", Box::new(|_g, x, _s, _| x.scale(-1.7))),
        ("matmul_left", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 4);
            let w = g.constant(rand_tensor(&[s[1], 3], &mut r, -1.0, 1.0));
            x.matmul(w)
        })),
        ("matmul_right", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 5);
            let a = g.constant(rand_tensor(&[2, s[0]], &mut r, -1.0, 1.0));
            a.matmul(x)
        })),
        ("matmul_batched", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 6);
            let b = g.constant(rand_tensor(&[2, s[1], 3], &mut r, -1.0, 1.0));
            let xx = Var::concat(&[x.reshape(&[1, s[0], s[1]])?, x.scale(0.5)?.reshape(&[1, s[0], s[1]])?], 0)?;
            xx.matmul(b)
        })),
        ("exp", Box::new(|_g, x, _s, _| x.exp())),
        ("log", Box::new(|_g, x, _s, _| x.mul(x)?.add_scalar(0.5)?.log())),
        ("sigmoid", Box::new(|_g, x, _s, _| x.sigmoid())),
        ("gelu", Box::new(|_g, x, _s, _| x.gelu())),
        ("softplus", Box::new(|_g, x, _s, _| x.softplus())),
        ("reshape", Box::new(|_g, x, s, _| x.reshape(&[s[0] * s[1]])?.exp())),
        ("transpose", Box::new(|_g, x, _s, _| x.transpose()?.exp())),
        ("permute3", Box::new(|_g, x, s, _| x.reshape(&[1, s[0], s[1]])?.permute(&[2, 0, 1])?.sigmoid())),
        ("concat", Box::new(|_g, x, _s, _| Var::concat(&[x.exp()?, x], 1))),
        ("slice", Box::new(|_g, x, s, _| x.slice(1, 0, s[1] - 1)?.exp())),
        ("gather_rows", Box::new(|_g, x, s, _| x.gather_rows(&[s[0] - 1, 0, 0])?.exp())),
        ("broadcast_to", Box::new(|_g, x, s, _| x.reshape(&[1, s[0], s[1]])?.broadcast_to(&[2, s[0], s[1]])?.exp())),
        ("sum_axis", Box::new(|_g, x, _s, _| x.exp()?.sum_axis(0))),
        ("mean_axis", Box::new(|_g, x, _s, _| x.exp()?.mean_axis(1))),
        ("masked_mean", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 7);
            let m = Tensor::from_fn(&[s[0]], |i| if i == 0 || r.uniform() < 0.5 { 1.0 } else { 0.0 });
            x.exp()?.masked_mean(g.constant(m), 0)
        })),
        ("segment_mean", Box::new(|_g, x, s, _| {
            let segs: Vec<usize> = (0..s[0]).map(|i| i % 2).collect();
            x.exp()?.segment_mean(&segs, 3)
        })),
        ("softmax", Box::new(|_g, x, _s, _| x.softmax())),
        ("log_softmax", Box::new(|_g, x, _s, _| x.log_softmax())),
        ("masked_softmax", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 9);
            let sc = x.matmul(x.transpose()?)?.reshape(&[1, s[0], s[0]])?;
            let m = binary_mask(s[0], &mut r);
            sc.masked_softmax(g.constant(m))
        })),
        ("layer_norm", Box::new(|g, x, s, seed| {
            let mut r = RngState::new(seed ^ 10);
            let gam = g.constant(rand_tensor(&[s[1]], &mut r, 0.5, 1.5));
            let bet = g.constant(rand_tensor(&[s[1]], &mut r, -0.5, 0.5));
            // A fixed column ramp keeps row variance away from zero, where f32
            // central differences lose all precision.
            let ramp = g.constant(Tensor::from_fn(&[s[1]], |j| j as f32));
            x.add(ramp)?.layer_norm(gam, bet, 1e-5)
        })),
        ("clamp_interior", Box::new(|_g, x, _s, _| x.clamp(-10.0, 10.0)?.exp())),
    ]
}

#[test]
fn every_primitive_passes_grad_check_on_random_shapes() {
    let mut shape_rng = RngState::new(99);
    let cases = primitive_cases();
    for (name, f) in &cases {
        for inst in 0..20u64 {
            let rows = 2 + shape_rng.below(4);
            let cols = 3 + shape_rng.below(4);
            let shape = [rows, cols];
            let mut prng = RngState::new(1000 + inst);
            let point: Tensor<f32> = rand_tensor(&shape, &mut prng, -1.0, 1.0);
            let seed = 77 + inst;
            let report = grad_check(
                |g, x| weighted_sum(g, f(g, x, &shape, seed)?, seed),
                &point,
                0.1,
                1e-3,
            )
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(report.passed, "{name} instance {inst} shape {shape:?}: {report:?}");
        }
    }
}

#[test]
fn masked_softmax_mask_gradient_matches_relaxed_differences() {
    // d/dm_j of the masked softmax, checked in f64 by perturbing a mask that
    // is represented as a differentiable input with binary forward value.
    let mut rng = RngState::new(11);
    let s0: Tensor<f64> = rand_tensor(&[2, 5, 5], &mut rng, -2.0, 2.0);
    let w0: Tensor<f64> = rand_tensor(&[2, 5, 5], &mut rng, -1.0, 1.0);
    let mask = Tensor::<f64>::from_f64(&[5], &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let g = Graph::<f64>::new();
    let m = g.param("m", &mask);
    let loss = g
        .constant(s0.clone())
        .masked_softmax(m)
        .unwrap()
        .mul(g.constant(w0.clone()))
        .unwrap()
        .sum_all()
        .unwrap();
    let dm = g.backward(loss).unwrap().by_name("m").unwrap().clone();
    // Oracle: the relaxed attention exp(S) * M / sum(exp(S) * M) evaluated
    // with real-valued M, differentiated by central differences.
    let relaxed = |mv: &[f64]| -> f64 {
        let mut total = 0.0;
        for b in 0..2 {
            for i in 0..5 {
                let w: Vec<f64> = (0..5)
                    .map(|j| {
                        let mm = if i == j { 1.0 } else { mv[j] };
                        s0.at(&[b, i, j]).exp() * mm
                    })
                    .collect();
                let z: f64 = w.iter().sum();
                for j in 0..5 {
                    total += w[j] / z * w0.at(&[b, i, j]);
                }
            }
        }
        total
    };
    for j in 0..5 {
        let h = 1e-6;
        let mut p = mask.data().to_vec();
        let mut q = p.clone();
        p[j] += h;
        q[j] -= h;
        let fd = (relaxed(&p) - relaxed(&q)) / (2.0 * h);
        assert!((fd - dm.data()[j]).abs() < 1e-6, "j={j}: {fd} vs {}", dm.data()[j]);
    }
}

#[test]
fn masked_mean_mask_gradient_matches_relaxed_differences() {
    let mut rng = RngState::new(12);
    let x0: Tensor<f64> = rand_tensor(&[3, 4, 2], &mut rng, -1.0, 1.0);
    let w0: Tensor<f64> = rand_tensor(&[3, 2], &mut rng, -1.0, 1.0);
    let mask = Tensor::<f64>::from_f64(&[3, 4], &[1., 0., 1., 1., 0., 1., 1., 0., 1., 1., 1., 1.]).unwrap();
    let g = Graph::<f64>::new();
    let m = g.param("m", &mask);
    let loss = g.constant(x0.clone()).masked_mean(m, 1).unwrap().mul(g.constant(w0.clone())).unwrap().sum_all().unwrap();
    let dm = g.backward(loss).unwrap().by_name("m").unwrap().clone();
    let relaxed = |mv: &[f64]| -> f64 {
        let mut total = 0.0;
        for o in 0..3 {
            let c: f64 = (0..4).map(|d| mv[o * 4 + d]).sum();
            for i in 0..2 {
                let s: f64 = (0..4).map(|d| mv[o * 4 + d] * x0.at(&[o, d, i])).sum();
                total += s / c * w0.at(&[o, i]);
            }
        }
        total
    };
    for j in 0..12 {
        let h = 1e-6;
        let mut p = mask.data().to_vec();
        let mut q = p.clone();
        p[j] += h;
        q[j] -= h;
        let fd = (relaxed(&p) - relaxed(&q)) / (2.0 * h);
        assert!((fd - dm.data()[j]).abs() < 1e-6, "j={j}: {fd} vs {}", dm.data()[j]);
    }
}

#[test]
fn per_sample_mask_matches_separate_calls() {
    let mut rng = RngState::new(13);
    let s0: Tensor<f64> = rand_tensor(&[2, 3, 4, 4], &mut rng, -2.0, 2.0);
    let w0: Tensor<f64> = rand_tensor(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
    let masks = [[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 1.0, 1.0]];
    let g = Graph::<f64>::new();
    let s = g.param("s", &s0);
    let m = g.param("m", &Tensor::from_f64(&[2, 4], &masks.concat()).unwrap());
    let joint = s.masked_softmax(m).unwrap();
    let loss = joint.mul(g.constant(w0.clone())).unwrap().sum_all().unwrap();
    let joint_val = joint.value();
    let grads = g.backward(loss).unwrap();
    for (b, mask) in masks.iter().enumerate() {
        let g1 = Graph::<f64>::new();
        let sb = g1.param("s", &Tensor::from_vec(&[3, 4, 4], s0.data()[b * 48..(b + 1) * 48].to_vec()).unwrap());
        let mb = g1.param("m", &Tensor::from_f64(&[4], mask).unwrap());
        let wb = g1.constant(Tensor::from_vec(&[3, 4, 4], w0.data()[b * 48..(b + 1) * 48].to_vec()).unwrap());
        let y = sb.masked_softmax(mb).unwrap();
        assert_eq!(y.value().data(), &joint_val.data()[b * 48..(b + 1) * 48]);
        let l = y.mul(wb).unwrap().sum_all().unwrap();
        let gb = g1.backward(l).unwrap();
        assert_eq!(gb.by_name("m").unwrap().data(), &grads.by_name("m").unwrap().data()[b * 4..(b + 1) * 4]);
        assert_eq!(gb.by_name("s").unwrap().data(), &grads.by_name("s").unwrap().data()[b * 48..(b + 1) * 48]);
    }
}
