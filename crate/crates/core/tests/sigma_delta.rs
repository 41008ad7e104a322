mod common;

#[test]
fn zero_threshold_accumulation_equals_dense_tokenization() {
    let gap = common::dense_equivalence_gap(1000, 42);
    assert!(gap <= 1e-10, "max abs deviation {gap}");
}

#[test]
fn skip_runs_never_exceed_the_horizon() {
    assert_eq!(common::horizon_violations(100_000, 7), 0);
}
