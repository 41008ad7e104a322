mod common;

#[test]
fn full_forward_matches_central_differences() {
    for seed in 0..3 {
        let r = common::full_forward_gradcheck(seed, 4);
        assert!(r.checked > 100);
        assert!(
            r.max_rel_error <= 1e-4,
            "seed {seed}: {} at {}[{}]: analytic {} numeric {}",
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            r.worst_analytic,
            r.worst_numeric
        );
    }
}
