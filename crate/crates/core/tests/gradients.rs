use freqdet_core::checks::{cases_for, run_cases, GROUPS};
use freqdet_core::gradcheck::GradcheckOptions;

#[test]
fn every_case_passes_on_five_seeds() {
    let opts = GradcheckOptions::default();
    let mut failures = Vec::new();
    for seed in 0..5 {
        let cases = cases_for(None, seed).unwrap();
        for r in run_cases(&cases, seed, &opts) {
            if !r.pass {
                failures.push(format!("seed {seed}: {}", r.summary()));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn every_group_has_cases() {
    for g in GROUPS {
        assert!(!cases_for(Some(g), 0).unwrap().is_empty(), "{g}");
    }
    assert!(cases_for(Some("nope"), 0).is_err());
}
