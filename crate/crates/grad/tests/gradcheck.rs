use sdacd_grad::{clip_global_norm, Adam, Tensor, Var};

/// Deterministic pseudo-random values in [-1, 1], kept away from zero so
/// piecewise-linear ops are not probed at their kinks.
fn values(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((s >> 33) as f64 / (1u64 << 31) as f64) as f32;
            let v = 2.0 * u - 1.0;
            if v.abs() < 0.1 {
                v.signum() * 0.1 + v
            } else {
                v
            }
        })
        .collect()
}

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, values(n, seed))
}

/// Compares the analytic gradient of `f` at each input against central
/// differences.
fn check(inputs: &[Tensor], f: impl Fn(&[Var]) -> Var, tol: f32) {
    let leaves: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
    let out = f(&leaves);
    let grads = out.backward();
    let h = 1e-2f32;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&leaves[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let eval = |delta: f32| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                f(&vars).value().item() as f64
            };
            let numeric = ((eval(h) - eval(-h)) / (2.0 * h as f64)) as f32;
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (1.0f32).max(a.abs()).max(numeric.abs());
            assert!(
                err < tol,
                "input {i} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(v: &Var) -> Var {
    let w = tensor(v.shape(), 999);
    v.mul(&Var::constant(w)).sum_all()
}

#[test]
fn elementwise_ops() {
    let a = tensor(&[2, 3], 1);
    let b = tensor(&[2, 3], 2);
    check(&[a.clone(), b.clone()], |v| probe(&v[0].add(&v[1])), 1e-2);
    check(&[a.clone(), b.clone()], |v| probe(&v[0].sub(&v[1])), 1e-2);
    check(&[a.clone(), b.clone()], |v| probe(&v[0].mul(&v[1])), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].scale(-3.0).add_scalar(0.5)), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].relu()), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].leaky_relu(0.2)), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].tanh()), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].sigmoid()), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].abs()), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].square()), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].scale(0.8).atanh_clip(0.999)), 2e-2);
    let pos = a.map(|x| x.abs() + 0.5);
    check(&[pos], |v| probe(&v[0].log_floor(1e-7)), 1e-2);
    check(&[a], |v| v[0].mean_all(), 1e-2);
}

#[test]
fn structural_ops() {
    let a = tensor(&[2, 3, 2, 2], 3);
    let b = tensor(&[2, 1, 2, 2], 4);
    check(&[a.clone(), b.clone()], |v| probe(&Var::cat(&[v[0].clone(), v[1].clone()], 1)), 1e-2);
    check(&[a.clone(), a.clone()], |v| probe(&Var::cat(&[v[0].clone(), v[1].clone()], 0)), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].upsample2x()), 1e-2);
    check(&[a.clone()], |v| probe(&v[0].global_avg_pool()), 1e-2);
    check(&[a], |v| probe(&v[0].reshape(&[4, 6])), 1e-2);
}

#[test]
fn linear_and_softmax() {
    let x = tensor(&[3, 4], 5);
    let w = tensor(&[2, 4], 6);
    let b = tensor(&[2], 7);
    check(&[x, w, b], |v| probe(&v[0].linear(&v[1], &v[2])), 1e-2);
    let logits = tensor(&[3, 3], 8);
    check(&[logits], |v| probe(&v[0].softmax_rows()), 1e-2);
}

#[test]
fn conv2d_gradients() {
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
        let x = tensor(&[2, 2, 6, 6], 10 + k as u64);
        let w = tensor(&[3, 2, k, k], 20 + stride as u64);
        let b = tensor(&[3], 30);
        check(
            &[x.clone(), w.clone(), b],
            |v| probe(&v[0].conv2d(&v[1], Some(&v[2]), stride, pad)),
            2e-2,
        );
        check(&[x, w], |v| probe(&v[0].conv2d(&v[1], None, stride, pad)), 2e-2);
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let x = tensor(&[1, 2, 5, 5], 40);
    let w = tensor(&[2, 2, 3, 3], 41);
    let b = tensor(&[2], 42);
    let y = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), Some(&Var::constant(b.clone())), 2, 1);
    assert_eq!(y.shape(), &[1, 2, 3, 3]);
    for o in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = b.data()[o] as f64;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                acc += x.data()[c * 25 + iy as usize * 5 + ix as usize] as f64
                                    * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx] as f64;
                            }
                        }
                    }
                }
                let got = y.value().data()[o * 9 + oy * 3 + ox] as f64;
                assert!((got - acc).abs() < 1e-5, "({o},{oy},{ox}): {got} vs {acc}");
            }
        }
    }
}

#[test]
fn scalar_map_uses_supplied_gradient() {
    let x = tensor(&[4], 50);
    check(
        &[x],
        |v| {
            v[0].scalar_map(|d| {
                let value = d.iter().map(|x| x * x * x).sum();
                (value, d.iter().map(|x| 3.0 * x * x).collect())
            })
        },
        1e-2,
    );
}

#[test]
fn shared_leaf_accumulates() {
    let x = Var::leaf(Tensor::new(&[2], vec![1.0, 2.0]));
    let y = x.mul(&x).add(&x).sum_all();
    let g = y.backward();
    assert_eq!(g.get(&x).unwrap().data(), &[3.0, 5.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let x = Var::leaf(tensor(&[3], 60));
    let c = Var::constant(tensor(&[3], 61));
    let g = x.mul(&c).sum_all().backward();
    assert!(g.get(&c).is_none());
    assert!(g.get(&x).is_some());
    let detached = x.detach();
    let g = detached.square().sum_all().backward();
    assert!(g.is_empty());
}

#[test]
fn adam_moves_against_gradient_and_skips_missing() {
    let mut a = Tensor::new(&[2], vec![1.0, -1.0]);
    let mut b = Tensor::new(&[1], vec![5.0]);
    let mut opt = Adam::new(0.1, 2);
    opt.step(&mut [&mut a, &mut b], &[Some(Tensor::new(&[2], vec![1.0, -2.0])), None]);
    // first Adam step moves each coordinate by ~lr in the sign direction
    assert!((a.data()[0] - 0.9).abs() < 1e-4);
    assert!((a.data()[1] + 0.9).abs() < 1e-4);
    assert_eq!(b.data(), &[5.0]);
    assert!(opt.moments[1].is_none());
}

#[test]
fn global_norm_clipping() {
    let mut g = vec![Some(Tensor::new(&[2], vec![3.0, 4.0])), None];
    let norm = clip_global_norm(&mut g, 1.0);
    assert!((norm - 5.0).abs() < 1e-6);
    let clipped = g[0].as_ref().unwrap();
    assert!((clipped.sum_sq().sqrt() - 1.0).abs() < 1e-5);
    let mut small = vec![Some(Tensor::new(&[1], vec![0.5]))];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].as_ref().unwrap().data(), &[0.5]);
}
