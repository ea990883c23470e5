//! Analytic head gradients against central finite differences.

mod common;

use common::gradient_error;
use unic_core::head::{HeadKind, LossWeights};

const STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn check(kind: HeadKind, weights: LossWeights) {
    for seed in 0..20 {
        let err = gradient_error(kind, seed, weights, STEP, FLOOR);
        assert!(err < TOL, "{kind:?} {weights:?} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn mlp_combined_loss() {
    check(HeadKind::Mlp, LossWeights::default());
}

#[test]
fn linear_combined_loss() {
    check(HeadKind::Linear, LossWeights::default());
}

#[test]
fn each_term_alone() {
    for kind in [HeadKind::Mlp, HeadKind::Linear] {
        check(kind, LossWeights::new(1.0, 0.0, 0.0));
        check(kind, LossWeights::new(0.0, 1.0, 0.0));
        check(kind, LossWeights::new(0.0, 0.0, 1.0));
    }
}

#[test]
fn unequal_weights() {
    check(HeadKind::Mlp, LossWeights::new(0.3, 2.5, 0.7));
}
