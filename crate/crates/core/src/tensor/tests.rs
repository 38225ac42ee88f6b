use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testing::{gradient_error, primitive_cases};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_slice(shape, data).unwrap()
}

#[test]
fn silu_of_zero_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    assert_eq!(x.silu().value().item(), 0.0);
}

#[test]
fn layer_norm_centres_and_scales() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = x.layer_norm(&g, &b, 0.0).unwrap().value();
    let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
    let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_statistics_on_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let case = &primitive_cases()[0];
    for _ in 0..20 {
        let raw = case.sample_inputs(&mut rng).remove(0); // [3,4]
        let x = tape.constant(raw.clone());
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let eps = 1e-5;
        let y = x.layer_norm(&g, &b, eps).unwrap().value();
        for (row, out) in raw.data().chunks(4).zip(y.data().chunks(4)) {
            let m_in = row.iter().sum::<f64>() / 4.0;
            let v_in = row.iter().map(|v| (v - m_in).powi(2)).sum::<f64>() / 4.0;
            let m = out.iter().sum::<f64>() / 4.0;
            let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-10);
            // eps inside the square root shrinks the variance to v/(v+eps)
            assert!((v - v_in / (v_in + eps)).abs() < 1e-8);
        }
        let y0 = x.layer_norm(&g, &b, 0.0).unwrap().value();
        for out in y0.data().chunks(4) {
            let m = out.iter().sum::<f64>() / 4.0;
            let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            assert!((v - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn abs_derivative_is_sign_with_zero_at_kink() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-2.0, 0.0, 4.0]), true);
    let y = x.abs().sum();
    tape.backward(&y).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn abs_kink_one_sided_differences() {
    // FD across the kink is meaningless; check each side separately.
    let f = |x: f64| {
        let tape = Tape::new();
        tape.constant(Tensor::scalar(x)).abs().value().item()
    };
    let h = 1e-6;
    assert!(((f(h) - f(0.0)) / h - 1.0).abs() < 1e-9);
    assert!(((f(0.0) - f(-h)) / h + 1.0).abs() < 1e-9);
}

#[test]
fn backward_of_quadratic() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let loss = x.mul(&x).unwrap().sum();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let loss = x.mul(&x).unwrap().sum();
    tape.backward(&loss).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(x.grad().is_none());
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let err = tape.backward(&x.square()).unwrap_err();
    assert_eq!(err, TensorError::NonScalarLoss(vec![2]));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    match a.add(&b).unwrap_err() {
        TensorError::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2]);
        }
        e => panic!("unexpected {e}"),
    }
    assert!(a.matmul(&a).is_err());
}

#[test]
fn operands_from_different_tapes_are_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.constant(Tensor::zeros(&[2]));
    let b = t2.constant(Tensor::zeros(&[2]));
    assert_eq!(a.add(&b).unwrap_err(), TensorError::TapeMismatch);
}

#[test]
fn matmul_with_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let case = &primitive_cases()[4];
    let a = case.sample_inputs(&mut rng).remove(0); // [3,5]
    let mut eye = Tensor::zeros(&[5, 5]);
    for i in 0..5 {
        eye.data_mut()[i * 6] = 1.0;
    }
    let tape = Tape::new();
    let y = tape.constant(a.clone()).matmul(&tape.constant(eye)).unwrap().value();
    assert!(y.max_abs_diff(&a) <= 1e-12);
}

#[test]
fn roll_and_slice_move_data() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 4], &[0.0, 1.0, 2.0, 3.0]));
    assert_eq!(x.roll(1, 1).unwrap().value().data(), &[3.0, 0.0, 1.0, 2.0]);
    assert_eq!(x.roll(1, -1).unwrap().value().data(), &[1.0, 2.0, 3.0, 0.0]);
    assert_eq!(x.slice(1, 1, 2).unwrap().value().data(), &[1.0, 2.0]);
    let c = Var::concat(&[&x, &x.scale(2.0)], 0).unwrap().value();
    assert_eq!(c.shape(), &[2, 4]);
    assert_eq!(c.data()[4..], [0.0, 2.0, 4.0, 6.0]);
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in primitive_cases() {
        for _ in 0..8 {
            let inputs = case.sample_inputs(&mut rng);
            let err = gradient_error(&case.build, &inputs, 1e-6).unwrap();
            assert!(err < 1e-4, "{}: relative error {err}", case.name);
        }
    }
}

#[test]
fn gradients_flow_only_to_requires_grad_leaves() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, -1.0]), true);
    let c = tape.constant(t(&[2], &[3.0, 4.0]));
    let loss = x.mul(&c).unwrap().sum();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[3.0, 4.0]);
    assert!(c.grad().is_none());
    assert!(!c.requires_grad());
}

#[test]
fn permute_matches_index_loop() {
    let tape = Tape::new();
    let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
    let x = tape.constant(Tensor::from_slice(&[2, 3, 4], &data).unwrap());
    let y = x.permute(&[2, 0, 1]).unwrap();
    assert_eq!(y.shape(), vec![4, 2, 3]);
    let v = y.value();
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                assert_eq!(v.data()[c * 6 + a * 3 + b], data[a * 12 + b * 4 + c]);
            }
        }
    }
    assert!(x.permute(&[0, 0, 1]).is_err());
    assert!(x.permute(&[1, 0]).is_err());
}
