use kdlab::gradcheck::{run_suite, GradcheckConfig};

#[test]
fn every_gradient_matches_finite_differences() {
    let reports = run_suite(&GradcheckConfig::default()).unwrap();
    for r in &reports {
        println!("{:<60} {:.3e}", r.component, r.max_rel_error);
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| &r.component).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
