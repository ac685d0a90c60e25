use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-1.5..1.5);
            if away_from_zero && v.abs() < 0.1 {
                v += 0.2f64.copysign(v);
            }
            v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(weights * op(inputs))` so every op can be checked through a scalar.
fn scalar_of(op: &OpKind, inputs: &[Tensor], weights: &Tensor) -> (Graph, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let y = g.forward(op.clone(), &ids).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w).unwrap();
    let out = g.sum(prod).unwrap();
    (g, ids, out)
}

/// Central finite differences with h = 1e-5 against the tape gradient.
fn check_gradients(op: OpKind, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) {
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let y = g.forward(op.clone(), &ids).unwrap();
        g.value(y).shape().to_vec()
    };
    let weights = random_tensor(rng, &out_shape, false);
    let (g, ids, out) = scalar_of(&op, &inputs, &weights);
    let grads = g.backward(out).unwrap();
    let h = 1e-5;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let eval = |delta: f64| {
                let mut shifted = inputs.clone();
                shifted[k].data_mut()[i] += delta;
                let (g, _, out) = scalar_of(&op, &shifted, &weights);
                g.value(out).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            let rel = (an - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 1e-4, "{op:?} input {k}[{i}]: analytic {an} vs fd {fd}");
        }
    }
}

#[test]
fn relu_definition() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_kernel_conv_leaves_sequence_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[7, 3], false);
    let mut kernel = vec![0.0; 9];
    for c in 0..3 {
        kernel[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let w = g.constant(t(&[1, 3, 3], &kernel));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.conv1d(xi, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn group_sum_adds_row_blocks() {
    let mut g = Graph::new();
    let x = g.constant(t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
    let y = g.group_sum(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 12.0, 14.0]);
    assert!(g.group_sum(x, 3).is_err());
}

#[test]
fn matmul_of_ones() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::full(&[2, 3], 1.0));
    let b = g.constant(Tensor::full(&[3, 2], 1.0));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &Tensor::full(&[2, 2], 3.0));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros(&[3]));
    let err = g.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(1000.0));
    assert!(matches!(g.exp(a), Err(crate::Error::NonFinite { op: "exp" })));
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
}

#[test]
fn relu_subgradient_is_zero_at_and_below_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1.0, 2.0, 0.0]));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::NotScalar(_))));
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let a = random_tensor(&mut rng, &[3, 4], false);
        let b = random_tensor(&mut rng, &[3, 4], false);
        for op in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
            check_gradients(op, vec![a.clone(), b.clone()], &mut rng);
        }
        check_gradients(OpKind::Scale(-1.7), vec![a.clone()], &mut rng);
        check_gradients(OpKind::AddScalar(0.3), vec![a.clone()], &mut rng);
        let m = random_tensor(&mut rng, &[4, 2], false);
        check_gradients(OpKind::MatMul, vec![a.clone(), m], &mut rng);
        let seq = random_tensor(&mut rng, &[9, 3], false);
        let kern = random_tensor(&mut rng, &[3, 3, 2], false);
        let bias = random_tensor(&mut rng, &[1, 2], false);
        for (stride, padding) in [(1, 0), (2, 0), (1, 2), (2, 1)] {
            check_gradients(
                OpKind::Conv1d { stride, padding },
                vec![seq.clone(), kern.clone(), bias.clone()],
                &mut rng,
            );
        }
        let kinked = random_tensor(&mut rng, &[3, 4], true);
        check_gradients(OpKind::Relu, vec![kinked.clone()], &mut rng);
        check_gradients(OpKind::Tanh, vec![a.clone()], &mut rng);
        check_gradients(OpKind::Softplus, vec![a.clone()], &mut rng);
        check_gradients(OpKind::Exp, vec![a.clone()], &mut rng);
        check_gradients(OpKind::Clamp { lo: -1.0, hi: 1.0 }, vec![kinked], &mut rng);
        check_gradients(OpKind::Sum, vec![a.clone()], &mut rng);
        check_gradients(OpKind::Mean, vec![a.clone()], &mut rng);
        check_gradients(OpKind::MeanRows, vec![a.clone()], &mut rng);
        let tall = random_tensor(&mut rng, &[6, 4], false);
        check_gradients(OpKind::GroupSum { group: 3 }, vec![tall.clone()], &mut rng);
        let row_w = random_tensor(&mut rng, &[6, 1], false);
        check_gradients(OpKind::RowScale, vec![tall, row_w], &mut rng);
        check_gradients(OpKind::SquaredNorm, vec![a.clone()], &mut rng);
        let c = random_tensor(&mut rng, &[3, 2], false);
        check_gradients(OpKind::Concat, vec![a.clone(), c, b.clone()], &mut rng);
        check_gradients(OpKind::SliceCols { start: 1, end: 3 }, vec![a.clone()], &mut rng);
        let bias = random_tensor(&mut rng, &[1, 4], false);
        check_gradients(OpKind::BiasAdd, vec![a.clone(), bias], &mut rng);
        let log_std = random_tensor(&mut rng, &[1, 4], false);
        check_gradients(OpKind::GaussianNll, vec![a.clone(), log_std, b.clone()], &mut rng);
    }
}

#[test]
fn small_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[4, 2], false);
    let params = vec![
        random_tensor(&mut rng, &[2, 1], false),
        random_tensor(&mut rng, &[1, 1], false),
        random_tensor(&mut rng, &[1, 2], false),
    ];
    assert_eq!(params.iter().map(Tensor::len).sum::<usize>(), 5);
    let loss = |p: &[Tensor]| {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let ids: Vec<NodeId> = p.iter().map(|t| g.param(t.clone())).collect();
        let h = g.matmul(xi, ids[0]).unwrap();
        let h = g.bias_add(h, ids[1]).unwrap();
        let h = g.tanh(h).unwrap();
        let y = g.matmul(h, ids[2]).unwrap();
        let out = g.squared_norm(y).unwrap();
        (g, ids, out)
    };
    let (g, ids, out) = loss(&params);
    let grads = g.backward(out).unwrap();
    let h = 1e-5;
    for (k, id) in ids.iter().enumerate() {
        for i in 0..params[k].len() {
            let f = |d: f64| {
                let mut p = params.clone();
                p[k].data_mut()[i] += d;
                let (g, _, o) = loss(&p);
                g.value(o).item()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let an = grads.wrt(*id).unwrap().data()[i];
            assert!((an - fd).abs() / fd.abs().max(1e-12) < 1e-4, "{an} vs {fd}");
        }
    }
}

#[test]
fn forward_backward_is_pure_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tensor(&mut rng, &[5, 3], false);
    let w = random_tensor(&mut rng, &[3, 3, 4], false);
    let b = random_tensor(&mut rng, &[1, 4], false);
    let run = || {
        let mut g = Graph::new();
        let (ai, wi, bi) = (g.constant(a.clone()), g.param(w.clone()), g.param(b.clone()));
        let y = g.conv1d(ai, wi, bi, 2, 1).unwrap();
        let y = g.softplus(y).unwrap();
        let s = g.mean(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(g.value(ai), &a);
        assert_eq!(g.value(wi), &w);
        (g.value(s).item().to_bits(), grads.wrt(wi).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(
        g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn unreached_params_get_zero_gradients() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(2.0));
    let unused = g.param(Tensor::zeros(&[2, 2]));
    let y = g.mul(a, a).unwrap();
    let grads = g.backward(y).unwrap();
    let all = grads.params(&g);
    assert_eq!(all.len(), 2);
    assert_eq!(all[1].0, unused);
    assert_eq!(all[1].1, Tensor::zeros(&[2, 2]));
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut params = vec![t(&[2], &[0.5, -1.0])];
    let mut state = AdamState::new(AdamConfig::default(), &params);
    state.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
    assert_eq!(params[0].data(), &[0.5, -1.0]);
    assert_eq!(state.step_count(), 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = vec![Tensor::scalar(0.0)];
    let mut state = AdamState::new(AdamConfig::default(), &params);
    state.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    let expected = -1e-3 / (1.0 + 1e-8);
    assert!((params[0].item() - expected).abs() < 1e-15);
}

#[test]
fn adam_constant_gradient_step_tends_to_lr() {
    let mut params = vec![Tensor::scalar(0.0)];
    let mut state = AdamState::new(AdamConfig::default(), &params);
    let mut prev = 0.0;
    let mut last_step = 0.0;
    for _ in 0..10_000 {
        state.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        last_step = prev - params[0].item();
        prev = params[0].item();
        assert!(state.second_moment()[0].item() >= 0.0);
    }
    assert_eq!(state.step_count(), 10_000);
    assert!((last_step - 1e-3).abs() < 1e-9, "step {last_step}");
}

#[test]
fn adam_rejects_non_finite_before_mutating() {
    let mut params = vec![t(&[2], &[1.0, 2.0])];
    let mut state = AdamState::new(AdamConfig::default(), &params);
    let err = state.step(&mut params, &[t(&[2], &[f64::NAN, 0.0])]);
    assert!(err.is_err());
    assert_eq!(params[0].data(), &[1.0, 2.0]);
    assert_eq!(state.step_count(), 0);
}
