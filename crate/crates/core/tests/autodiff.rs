mod common;

use btxforge_core::tensor::{Tape, Tensor};
use common::{op_cases, op_gradient_error, uniform};
use proptest::prelude::*;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        let err = op_gradient_error(&case);
        if err > 1e-6 {
            failures.push(format!("{}: {err:.3e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn fan_out_sums_path_gradients() {
    let x0 = uniform(&[2, 3], -1.0, 1.0, 5);
    let w0 = uniform(&[3, 3], -1.0, 1.0, 6);
    // Path a: sum(x · w); path b: sum(sigmoid(x)).
    let grad = |use_a: bool, use_b: bool| {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone()).unwrap();
        let w = tape.constant(w0.clone()).unwrap();
        let a = tape.matmul(x, w).unwrap();
        let a = tape.sum_all(a).unwrap();
        let b = tape.sigmoid(x).unwrap();
        let b = tape.sum_all(b).unwrap();
        let root = match (use_a, use_b) {
            (true, true) => tape.add(a, b).unwrap(),
            (true, false) => a,
            _ => b,
        };
        tape.backward(root).unwrap().get(x).unwrap().clone()
    };
    let both = grad(true, true);
    let a = grad(true, false);
    let b = grad(false, true);
    for i in 0..both.numel() {
        assert!((both.data()[i] - (a.data()[i] + b.data()[i])).abs() < 1e-15);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::<f64>::ones(&[2])).unwrap();
    let c = tape.constant(Tensor::<f64>::full(&[2], 3.0)).unwrap();
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum_all(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-1e6f64..1e6, 1..24), split in 1usize..4) {
        let cols = values.len().div_ceil(split);
        let mut padded = values.clone();
        padded.resize(cols * split, 0.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![split, cols], padded).unwrap()).unwrap();
        let p = tape.softmax(x, 1).unwrap();
        for row in tape.value(p).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}
