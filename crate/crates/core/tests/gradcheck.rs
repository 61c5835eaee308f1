use fusion_core::tensor::gradcheck::{check_all_ops, finite_difference};
use fusion_core::tensor::Tensor;

const TOLERANCE: f64 = 1e-3;

#[test]
fn every_op_matches_finite_differences() {
    for seed in [7, 8] {
        let checks = check_all_ops(seed).unwrap();
        assert_eq!(checks.len(), 17);
        for c in &checks {
            assert!(c.numeric_norm > 1e-4, "{}: gradient vanishes, check is vacuous", c.op);
            assert!(c.relative_error < TOLERANCE, "{}: relative error {:.2e}", c.op, c.relative_error);
        }
    }
}

#[test]
fn a_wrong_gradient_is_caught() {
    // relu evaluated across its kink: the tape's subgradient and the numeric
    // slope disagree, so the checker must report a large error
    let x = Tensor::new(vec![4], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let c = finite_difference("relu-at-zero", &[x], |g, p| Ok(g.relu(p[0])), 3).unwrap();
    assert!(c.relative_error > 0.1, "{c:?}");
}
