use dkp_core::selfcheck::{pipeline_checks, primitive_checks};

const TOL: f64 = 1e-4;

#[test]
fn primitives_match_central_differences() {
    for seed in 0..10 {
        for r in primitive_checks(seed).unwrap() {
            assert!(r.report.passes(TOL), "seed {seed} {}: {:?}", r.name, r.report);
            assert!(r.report.checked > 0, "seed {seed} {}: every coordinate excluded", r.name);
        }
    }
}

#[test]
fn student_pipeline_matches_central_differences() {
    for seed in 0..10 {
        let reports = pipeline_checks(seed, 3).unwrap();
        let checked: usize = reports.iter().map(|r| r.report.checked).sum();
        assert!(checked > 0);
        for r in reports {
            assert!(r.report.passes(TOL), "seed {seed} {}: {:?}", r.name, r.report);
        }
    }
}
