use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tetnp::verify::*;

fn quick() -> VerifyOptions {
    VerifyOptions {
        tasks: 20,
        masked_instances: 20,
        ..VerifyOptions::default()
    }
}

#[test]
fn fresh_build_passes_every_suite() {
    let report = run(None, &quick()).unwrap();
    assert_eq!(report.suites.len(), Suite::ALL.len());
    for s in &report.suites {
        for c in &s.checks {
            assert!(c.passed, "{}: {} = {:e} vs {:e} ({})", s.suite, c.name, c.value, c.threshold, c.detail);
        }
    }
    assert!(report.passed());
}

#[test]
fn scope_runs_only_the_named_suite() {
    let report = run(Some(Suite::Masked), &quick()).unwrap();
    assert_eq!(report.suites.len(), 1);
    assert_eq!(report.suites[0].suite, Suite::Masked);
    assert_eq!(report.suites[0].checks.len(), 1);
}

#[test]
fn fixed_pseudo_locations_fail_equivariance_with_a_named_shift() {
    let opts = VerifyOptions {
        mutation: Some(Mutation::FixedPseudoLocations),
        ..quick()
    };
    let report = run(Some(Suite::Equivariance), &opts).unwrap();
    assert!(!report.passed());
    let failed: Vec<&Check> = report.suites[0].checks.iter().filter(|c| !c.passed).collect();
    assert_eq!(failed.len(), 2);
    for c in failed {
        assert!(c.name.starts_with("te-pt-tnp"), "{}", c.name);
        assert!(c.detail.contains("worst tau = "), "{}", c.detail);
        assert!(c.value > 1e-3);
    }
}

#[test]
fn masked_gap_is_at_rounding_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        assert!(masked_block_gap(&mut rng).unwrap() < 1e-10);
    }
}

#[test]
fn suite_and_mutation_names_parse() {
    for s in Suite::ALL {
        assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
    }
    assert!("speed".parse::<Suite>().is_err());
    assert_eq!(
        "fixed-pseudo-locations".parse::<Mutation>().unwrap(),
        Mutation::FixedPseudoLocations
    );
    assert!("off-by-one".parse::<Mutation>().is_err());
}
