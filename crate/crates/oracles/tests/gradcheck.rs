//! Analytic tape gradients against central differences of the independent
//! `f64` interpreter.

use cpak_core::model::Architecture;
use cpak_oracles::graphs::{model_input_gradient_error, smooth_random_graph, H, MARGIN};
use proptest::prelude::*;

#[test]
fn fifty_random_graphs() {
    let mut worst = (0.0, String::new());
    for seed in 0..50 {
        let g = smooth_random_graph(seed, MARGIN);
        let err = g.max_error(H);
        assert!(err <= 1e-3, "graph {seed} ({}): {err:e}", g.description);
        if err > worst.0 {
            worst = (err, g.description.clone());
        }
    }
    eprintln!("worst relative error {:e} on {}", worst.0, worst.1);
}

#[test]
fn full_model_input_gradients() {
    for arch in [Architecture::SmallConvNetA, Architecture::SmallConvNetB] {
        let err = model_input_gradient_error(arch, 16, 3);
        assert!(err <= 1e-2, "{arch:?}: {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_graph_gradients_match(seed in 1000u64..1_000_000) {
        let g = smooth_random_graph(seed, MARGIN);
        let err = g.max_error(H);
        prop_assert!(err <= 1e-3, "{} : {err:e}", g.description);
    }
}
