mod support;

use std::time::Instant;

use support::fd_check;

#[test]
fn analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let worst = fd_check(false);
    for (group, err) in &worst {
        println!("{group:<24} max rel err {err:.2e}");
    }
    for prefix in ["s2.", "s1.", "fusion.", "projector."] {
        assert!(
            worst.keys().any(|k| k.starts_with(prefix)),
            "no {prefix} parameters checked"
        );
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    assert!(max <= 1e-3, "max relative error {max:.3e}");
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn scaled_mixup_variant_gradients_match() {
    let max = fd_check(true).values().copied().fold(0.0, f64::max);
    assert!(max <= 1e-3, "max relative error {max:.3e}");
}
