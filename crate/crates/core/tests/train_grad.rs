mod common;

use common::*;

#[test]
fn stage1_gradient_matches_finite_differences() {
    let r = stage1_gradient_check();
    assert!(r.checked() > 20 && r.all_groups_checked(), "{r:?}");
    assert!(r.worst() < 1e-4, "{r:?}");
}

#[test]
fn stage2_gradient_matches_finite_differences() {
    let r = stage2_gradient_check();
    assert!(r.checked() > 20 && r.all_groups_checked(), "{r:?}");
    assert!(r.worst() < 1e-4, "{r:?}");
    assert!(r.stage1_untouched);
}
