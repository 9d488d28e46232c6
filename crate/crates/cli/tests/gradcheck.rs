mod common;

use common::*;

#[test]
fn every_scope_passes() {
    for scope in ["op", "cell", "full"] {
        let out = ok(&["gradcheck", "--scope", scope]);
        assert!(out.lines().any(|l| l == "gradcheck passed"), "{scope}: {out}");
        assert!(!out.lines().any(|l| l.starts_with("FAIL")), "{scope}: {out}");
    }
}

#[test]
fn injected_fault_fails_with_a_numeric_exit() {
    let out = run(&["gradcheck", "--scope", "cell", "--inject-fault", "negate-tanh"]);
    assert_eq!(code(&out), 3);
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("FAIL")), "{text}");
    assert!(!text.contains("gradcheck passed"));
}
