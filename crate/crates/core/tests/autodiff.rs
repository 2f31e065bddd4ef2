use nlran::gradcheck::{finite_difference_check, suite, SUITE_TOLERANCE};
use nlran::ops::{ConvSpec, PoolSpec, ResampleMode, ResizePlan};
use nlran::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

#[test]
fn every_suite_entry_is_within_tolerance() {
    let results = suite(7).unwrap();
    assert!(results.len() >= 14);
    for r in &results {
        assert!(r.passed, "{} rel err {}", r.name, r.max_rel_error);
        assert!(r.max_rel_error < SUITE_TOLERANCE);
    }
}

#[test]
fn backward_accumulates_through_shared_inputs() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap(), true);
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, -3.0, 7.0]);
}

#[test]
fn constants_carry_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let x = tape.leaf(Tensor::ones(&[2]), true);
    let y = tape.mul(c, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::ones(&[3]));
    assert!(tape.add(a, b).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv3d_gradient_matches_finite_difference(x in tensor(vec![1, 2, 3, 4, 3]), w in tensor(vec![2, 2, 2, 2, 2])) {
        let spec = ConvSpec { in_channels: 2, out_channels: 2, kernel: [2, 2, 2], stride: [1, 2, 1], padding: [1, 0, 1], has_bias: false };
        let err = finite_difference_check(|t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv3d(v, wv, None, &spec)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }

    #[test]
    fn softmax_cross_entropy_is_positive(x in tensor(vec![4, 3]), labels in prop::collection::vec(0usize..3, 4)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let l = tape.softmax_cross_entropy(v, &labels).unwrap();
        prop_assert!(tape.value(l).item().unwrap() > 0.0);
    }

    #[test]
    fn resize_to_same_extent_is_identity(x in tensor(vec![1, 2, 3, 4, 5])) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let plan = ResizePlan::new([3, 4, 5], [3, 4, 5], ResampleMode::Trilinear).unwrap();
        let y = tape.resize(v, plan).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn maxpool_output_is_bounded_by_input_max(x in tensor(vec![1, 1, 5, 5, 5])) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.maxpool3d(v, &PoolSpec::cube(3, 2, 1)).unwrap();
        let m = x.data().iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(tape.value(y).data().iter().all(|&a| a <= m));
        prop_assert_eq!(tape.shape(y), &[1, 1, 3, 3, 3]);
    }

    #[test]
    fn channel_attention_has_unit_norm(x in tensor(vec![1, 3, 2, 2, 2])) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.channel_attention(v).unwrap();
        let d = tape.value(y).data();
        for i in 0..8 {
            let n: f64 = (0..3).map(|c| d[c * 8 + i].powi(2)).sum();
            prop_assert!((n.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
