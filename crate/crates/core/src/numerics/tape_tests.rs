use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `build` on fresh tapes and compares backward against central differences for every input.
fn check_grads(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[idx]);
        let numeric = finite_diff_grad(
            |theta| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        if j == idx {
                            t.param(Tensor::new(input.shape().to_vec(), theta.to_vec()).unwrap())
                        } else {
                            t.param(x.clone())
                        }
                    })
                    .collect();
                let l = build(&mut t, &vs);
                t.value(l).data()[0]
            },
            input.data(),
            1e-4,
        );
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Fixed random weighting so every output element influences the scalar loss differently.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(tape.shape(x), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap());
    let s = tape.softmax(x).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).unwrap().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn unreached_leaf_gets_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0));
    let unused = tape.param(Tensor::scalar(2.0));
    let l = tape.square(x).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.tensor(unused).data(), &[0.0]);
}

#[test]
fn forward_rejects_non_finite() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1e200));
    assert!(matches!(tape.square(x), Err(NumericsError::NonFinite(_))));
}

#[test]
fn activation_values() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert_eq!(0f64.tanh(), 0.0);
    assert_eq!(gelu(0.0), 0.0);
    // x·Φ(x) − (−x)·Φ(−x) = x·(Φ(x) + Φ(−x)) = x
    assert!((gelu(1.3) - gelu(-1.3) - 1.3).abs() < 1e-14);
    assert!(sigmoid(-20.0) > 0.0 && sigmoid(-20.0) < 3e-9);
}

#[test]
fn layer_norm_cases() {
    let run = |vals: Vec<f64>| {
        let n = vals.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n], vals).unwrap());
        let g = tape.constant(Tensor::full(&[n], 1.0));
        let b = tape.constant(Tensor::zeros(&[n]));
        let y = tape.layer_norm(x, g, b).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(vec![1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
    let y = run(vec![-1.0, 1.0]);
    assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vals: Vec<f64> = (0..17).map(|_| rng.gen_range(-5.0..5.0)).collect();
    // Direct moments of the normalized slice; eps shifts the variance by at most eps/var.
    let y = run(vals);
    let mean = y.iter().sum::<f64>() / 17.0;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 17.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&[4, 3], &mut rng);
    let b = rand_tensor(&[3, 2], &mut rng);
    let mut expect = vec![0.0; 8];
    for i in 0..4 {
        for j in 0..2 {
            for p in 0..3 {
                expect[i * 2 + j] += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn grad_matmul_bias_and_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [rand_tensor(&[2, 3, 4], &mut rng), rand_tensor(&[4, 5], &mut rng), rand_tensor(&[5], &mut rng)];
    let err = check_grads(&inputs, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        let a = t.tanh(y).unwrap();
        let s = t.sigmoid(y).unwrap();
        let m = t.mul(a, s).unwrap();
        let g = t.gelu(m).unwrap();
        let d = t.sub(g, y).unwrap();
        let e = t.add(d, a).unwrap();
        let f = t.scale(e, 0.7).unwrap();
        let q = t.square(f).unwrap();
        let s2 = t.sin(q).unwrap();
        weighted_sum(t, s2, 9)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_softmax_layernorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [rand_tensor(&[3, 6], &mut rng), rand_tensor(&[6], &mut rng), rand_tensor(&[6], &mut rng)];
    let err = check_grads(&inputs, |t, v| {
        let s = t.softmax(v[0]).unwrap();
        let s = t.scale(s, 3.0).unwrap();
        let y = t.layer_norm(s, v[1], v[2]).unwrap();
        weighted_sum(t, y, 4)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [rand_tensor(&[2, 3, 4], &mut rng), rand_tensor(&[2, 1, 4], &mut rng), rand_tensor(&[5, 2], &mut rng)];
    let err = check_grads(&inputs, |t, v| {
        let p = t.permute(v[0], &[2, 0, 1]).unwrap();
        let r = t.reshape(p, &[4, 6]).unwrap();
        let b = t.broadcast(v[1], &[2, 3, 4]).unwrap();
        let g = t.gather_rows(v[2], &[0, 4, 4, 1, 2, 3, 0, 1, 2, 3, 4, 0]).unwrap();
        let g = t.reshape(g, &[4, 6]).unwrap();
        let br = t.reshape(b, &[4, 6]).unwrap();
        let c = t.concat(&[r, br, g]).unwrap();
        let st = t.reshape(c, &[2, 2, 18]).unwrap();
        let st = t.stcb(st).unwrap();
        let m = t.mean(st).unwrap();
        let w = weighted_sum(t, st, 8);
        t.add(m, w).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let target = rand_tensor(&[3, 4], &mut rng);
    let inputs = [rand_tensor(&[3, 4], &mut rng)];
    let err = check_grads(&inputs, |t, v| {
        let a = t.mae_loss(v[0], &target).unwrap();
        let b = t.mse_loss(v[0], &target).unwrap();
        t.add(a, b).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_attention_all_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (g, s, w) = (3, 5, 6);
    let mut mask = Tensor::zeros(&[s, s]);
    for i in 0..s {
        for j in 0..s {
            if rng.gen_bool(0.5) {
                mask.set2(i, j, rng.gen_range(0.2..2.0));
            }
        }
    }
    // one fully masked row
    for j in 0..s {
        mask.set2(2, j, 0.0);
    }
    let inputs = [rand_tensor(&[g, s, w], &mut rng), rand_tensor(&[g, s, w], &mut rng), rand_tensor(&[g, s, w], &mut rng)];
    for (m, mode) in [(None, MaskMode::Exclude), (Some(&mask), MaskMode::Exclude), (Some(&mask), MaskMode::Multiply)] {
        let err = check_grads(&inputs, |t, v| {
            let a = t
                .attention(v[0], v[1], v[2], AttentionOpts { heads: 2, mask: m, mode, dropout: None })
                .unwrap();
            weighted_sum(t, a, 3)
        });
        assert!(err < 1e-6, "{mode:?}: {err}");
    }
}

#[test]
fn grad_dropout_with_fixed_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [rand_tensor(&[2, 4, 4], &mut rng), rand_tensor(&[2, 4, 4], &mut rng), rand_tensor(&[2, 4, 4], &mut rng)];
    let err = check_grads(&inputs, |t, v| {
        // Same seed on every rebuild, so the sampled masks are identical.
        let mut d = Dropout::new(0.3, ChaCha8Rng::seed_from_u64(99));
        let a = t
            .attention(v[0], v[1], v[2], AttentionOpts { heads: 2, mask: None, mode: MaskMode::Exclude, dropout: Some(&mut d) })
            .unwrap();
        let a = t.dropout(a, Some(&mut d)).unwrap();
        weighted_sum(t, a, 1)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn injected_fault_is_visible() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[5], &mut rng);
    let mut tape = Tape::new();
    tape.inject_fault(OpKind::Tanh);
    let v = tape.param(x.clone());
    let y = tape.tanh(v).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap().tensor(v);
    let numeric = finite_diff_grad(|th| th.iter().map(|a| a.tanh()).sum(), x.data(), 1e-4);
    assert!(relative_error(g.data(), &numeric) > 0.3);
}

#[test]
fn op_kind_names_round_trip() {
    for k in OpKind::ALL {
        assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&[3, 4, 8], &mut rng);
    let run = || {
        let mut t = Tape::new();
        let v = t.param(a.clone());
        let y = t.attention(v, v, v, AttentionOpts { heads: 4, mask: None, mode: MaskMode::Exclude, dropout: None }).unwrap();
        let l = weighted_sum(&mut t, y, 2);
        t.backward(l).unwrap().tensor(v)
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
            let n = vals.len();
            let s = softmax_lastdim(&Tensor::new(vec![n], vals).unwrap()).unwrap();
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
