use rmot_core::harness::{gradient_suite, GRADIENT_TOLERANCE};

#[test]
fn micro_model_gradients_match_finite_differences() {
    for seed in [3, 17, 40] {
        for c in gradient_suite(seed).unwrap() {
            assert!(c.passed, "seed {seed} {}: {:.3e} > {GRADIENT_TOLERANCE:e}", c.name, c.max_rel_error);
        }
    }
}
