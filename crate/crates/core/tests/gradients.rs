//! Tape gradients against central finite differences for every op.

use videogen::autodiff::suite::run_suite;

#[test]
fn every_op_matches_finite_differences() {
    let reports = run_suite(7).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.op).collect();
    for op in ["conv2d", "temporal_conv", "attention", "group_norm", "warp", "l1", "mse"] {
        assert!(names.contains(&op), "{op} missing from the suite");
    }
    for r in &reports {
        assert!(r.shapes >= 5, "{}: only {} shapes", r.op, r.shapes);
        assert!(r.max_error < 1e-3, "{}: relative error {:.3e}", r.op, r.max_error);
    }
}

#[test]
fn suite_is_seed_independent() {
    for r in run_suite(1234).unwrap() {
        assert!(r.max_error < 1e-3, "{}: relative error {:.3e}", r.op, r.max_error);
    }
}
