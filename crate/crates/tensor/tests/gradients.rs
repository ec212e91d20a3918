//! Finite-difference checks of every tape op, plus algebraic properties.

use proptest::prelude::*;
use vinlab_tensor::{grad_check, gradcheck, ops, Result, Tape, Tensor, Var};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    gradcheck::check_tensor(shape, seed)
}

fn project(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    gradcheck::project(tape, x)
}

#[test]
fn every_op_passes() {
    let suite = gradcheck::op_suite(None).unwrap();
    assert_eq!(suite.len(), 8);
    for (name, report) in suite {
        assert!(report.checked > 0, "{name}");
        assert!(
            report.passes(gradcheck::OP_TOL),
            "{name} grad error {}",
            report.max_rel_error
        );
    }
}

#[test]
fn injected_fault_fails_conv_cases() {
    for (name, report) in gradcheck::op_suite(Some(1.5)).unwrap() {
        assert_eq!(report.max_rel_error > 1e-3, name.starts_with("conv"), "{name}");
    }
}

#[test]
fn attention_gradient_only_at_selected_cell() {
    let mut tape = Tape::<f64>::new();
    let q = tape.param(0, rand_tensor(&[10, 4, 4], 16)).unwrap();
    let psi = tape.pick_cell(q, 1, 2).unwrap();
    let loss = project(&mut tape, psi).unwrap();
    let g = tape.backward(loss).unwrap();
    let gq = g.wrt(q).unwrap();
    for c in 0..10 {
        for i in 0..4 {
            for j in 0..4 {
                if (i, j) != (1, 2) {
                    assert_eq!(gq.at3(c, i, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn faulty_backward_is_caught() {
    let params = [rand_tensor(&[2, 4, 4], 17), rand_tensor(&[3, 2, 3, 3], 18)];
    let report = grad_check(&params, 1e-6, None, |t, v| {
        t.inject_conv_grad_fault(1.5);
        let y = t.conv2d_same(v[0], v[1], None)?;
        project(t, y)
    })
    .unwrap();
    assert!(report.max_rel_error > 1e-3);
}

#[test]
fn forward_is_deterministic() {
    let x = rand_tensor(&[2, 8, 8], 19).cast::<f32>();
    let k = rand_tensor(&[10, 2, 3, 3], 20).cast::<f32>();
    let a = ops::conv2d_same(&x, &k, None).unwrap();
    let b = ops::conv2d_same(&x, &k, None).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn conv_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = rand_tensor(&[2, 5, 4], seed);
        let y = rand_tensor(&[2, 5, 4], seed + 1);
        let k = rand_tensor(&[3, 2, 3, 3], seed + 2);
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = ops::conv2d_same(&mix, &k, None).unwrap();
        let cx = ops::conv2d_same(&x, &k, None).unwrap();
        let cy = ops::conv2d_same(&y, &k, None).unwrap();
        for i in 0..lhs.numel() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn channel_max_backward_conserves_gradient(seed in 0u64..10_000, c in 1usize..6) {
        let x = rand_tensor(&[c, 3, 4], seed);
        let g = rand_tensor(&[1, 3, 4], seed + 7);
        let (_, argmax) = ops::channel_max(&x).unwrap();
        let gi = ops::channel_max_backward(x.shape(), &argmax, &g);
        for cell in 0..12 {
            let total: f64 = (0..c).map(|ch| gi.data()[ch * 12 + cell]).sum();
            prop_assert_eq!(total, g.data()[cell]);
        }
    }

    #[test]
    fn softmax_shift_invariant(seed in 0u64..10_000, shift in -20.0f64..20.0) {
        let logits = rand_tensor(&[8], seed);
        let shifted = Tensor::from_fn(&[8], |i| logits.data()[i] + shift);
        let p = ops::softmax(&logits);
        let q = ops::softmax(&shifted);
        for i in 0..8 {
            prop_assert!((p.data()[i] - q.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_then_pool_is_identity(seed in 0u64..10_000, m in 1usize..5, n in 1usize..5) {
        let x = rand_tensor(&[2, m, n], seed);
        let up = ops::upsample_nearest(&x).unwrap();
        prop_assert_eq!(ops::maxpool2d(&up).unwrap().0, x);
    }
}
