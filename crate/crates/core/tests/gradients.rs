mod common;

use brainrot::nn::Activation;
use brainrot::regressor::LossKind;
use common::*;

#[test]
fn vit_cross_entropy_gradients_match_finite_differences() {
    for seed in 0..5 {
        let e = vit_gradient_error(seed);
        assert!(e < 1e-3, "seed {seed}: rel err {e}");
    }
}

#[test]
fn regressor_mse_gradients_match_finite_differences() {
    for seed in 0..5 {
        let e = regressor_gradient_error(seed, LossKind::Mse, Activation::Silu, true, false);
        assert!(e < 1e-3, "seed {seed}: rel err {e}");
    }
}

#[test]
fn regressor_nll_gradients_match_finite_differences() {
    for seed in 0..5 {
        let e = regressor_gradient_error(seed, LossKind::Nll, Activation::Silu, true, false);
        assert!(e < 1e-3, "seed {seed}: rel err {e}");
    }
}

#[test]
fn regressor_gradients_hold_with_dropout_and_other_switches() {
    for seed in 0..5 {
        let a = regressor_gradient_error(seed, LossKind::Mse, Activation::Silu, true, true);
        let b = regressor_gradient_error(seed, LossKind::Nll, Activation::Gelu, false, true);
        let c = regressor_gradient_error(seed, LossKind::Mse, Activation::LeakyRelu, true, false);
        assert!(a < 1e-3 && b < 1e-3 && c < 1e-3, "seed {seed}: {a} {b} {c}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let e = input_gradient_error(seed);
        assert!(e < 1e-3, "seed {seed}: rel err {e}");
    }
}
