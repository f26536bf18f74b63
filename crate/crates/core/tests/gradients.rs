mod common;

use common::grad::{self, Report, TOLERANCE};
use leafscope::layers::Padding;

fn assert_ok(name: &str, r: Report) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_err <= TOLERANCE, "{name}: max relative error {:.3e}", r.max_rel_err);
}

#[test]
fn conv2d_all_geometries() {
    for (i, &(stride, pad)) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)].iter().enumerate() {
        assert_ok(&format!("conv s{stride} {pad:?}"), grad::conv_instance(900 + i as u64, stride, pad));
    }
}

#[test]
fn maxpool2() {
    assert_ok("pool", grad::pool_instance(901));
}

#[test]
fn dense_single_and_batch() {
    assert_ok("dense", grad::dense_instance(902, None));
    assert_ok("dense batch", grad::dense_instance(903, Some(4)));
}

#[test]
fn relu_away_from_zero() {
    assert_ok("relu", grad::relu_instance(904));
}

#[test]
fn softmax_cross_entropy() {
    assert_ok("scce", grad::scce_instance(905));
}

#[test]
fn dropout_with_fixed_mask() {
    assert_ok("dropout", grad::dropout_instance(906));
}

#[test]
fn tiny_model_every_parameter() {
    assert_ok("tiny", grad::tiny_model_instance(907, false));
    assert_ok("tiny dropout", grad::tiny_model_instance(908, true));
}

#[test]
fn checker_detects_a_wrong_gradient() {
    let x = leafscope::Tensor::<f64>::from_fn(vec![3], |i| i as f64);
    let wrong = leafscope::Tensor::<f64>::full(vec![3], 1.0);
    let r = grad::check(&x, &wrong, |v| (v.data().iter().map(|a| a * a).sum::<f64>(), ()));
    assert!(r.max_rel_err > 0.5);
}
