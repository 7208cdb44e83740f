//! The whole named finite-difference suite, over two seeds.

use cafpn_core::checks::{all_check_names, default_options, run_check, GRAD_TOL};

fn check_all(seed: u64) {
    let mut failures = Vec::new();
    for name in all_check_names() {
        let r = run_check(name, seed, default_options()).unwrap();
        assert!(r.checked > 0, "{name}: nothing was checked");
        if !r.passes(GRAD_TOL) {
            failures.push(format!("{name}: max rel error {:.3e}", r.max_rel_error));
        }
    }
    assert!(failures.is_empty(), "seed {seed}: {failures:?}");
}

#[test]
fn all_checks_pass_seed_0() {
    check_all(0);
}

#[test]
fn all_checks_pass_seed_1() {
    check_all(1);
}

#[test]
fn unknown_check_is_a_config_error() {
    let e = run_check("no-such-module", 0, default_options()).unwrap_err();
    assert!(e.to_string().contains("no-such-module"), "{e}");
}
