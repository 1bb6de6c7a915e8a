mod common;

use common::grad::*;
use varc::vit::{LossMask, PositionalMode};

#[test]
fn linear_matches_f64_reference() {
    let (grad, fwd) = linear_errors();
    assert!(grad < 1e-4, "gradient {grad}");
    assert!(fwd < 1e-5, "forward {fwd}");
}

#[test]
fn layer_norm_matches_f64_reference() {
    let (grad, fwd) = layer_norm_errors();
    assert!(grad < 1e-4, "gradient {grad}");
    assert!(fwd < 1e-4, "forward {fwd}");
}

#[test]
fn primitive_ops_match_finite_differences() {
    for (op, err) in op_errors() {
        assert!(err < 1e-2, "{op}: {err}");
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for mode in ALL_MODES {
        let err = model_grad_error(grad_config(mode), LossMask::Full, None);
        assert!(err < 1e-2, "{mode:?}: {err}");
    }
}

#[test]
fn model_gradients_with_dropout_and_foreground_mask() {
    let mut cfg = grad_config(PositionalMode::Rope2d);
    cfg.mlp_dropout = 0.1;
    cfg.attn_dropout = 0.1;
    let err = model_grad_error(cfg, LossMask::InputForeground, Some(9));
    assert!(err < 1e-2, "{err}");
}
