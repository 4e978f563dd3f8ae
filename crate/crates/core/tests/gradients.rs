use vmamba3d::diagnostics::gradcheck::{
    check_composite, check_model, check_op, op_suite, tiny_check_config, Composite, OP_TOLERANCE,
};
use vmamba3d::tensor::OpKind;

#[test]
fn every_op_passes() {
    let results = op_suite(20, 7).unwrap();
    assert_eq!(results.len(), OpKind::DIFFERENTIABLE.len());
    for r in &results {
        assert!(r.passed, "{} rel error {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn table_lists_each_op_once() {
    let results = op_suite(1, 1).unwrap();
    let mut names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), OpKind::DIFFERENTIABLE.len());
}

#[test]
fn injected_fault_is_caught() {
    for kind in [
        OpKind::Linear,
        OpKind::SelectiveScanParallel,
        OpKind::Conv3d,
    ] {
        let r = check_op(kind, 3, 11, true).unwrap();
        assert!(!r.passed, "{} fault went unnoticed", r.name);
        assert!(r.max_rel_error > OP_TOLERANCE);
    }
}

#[test]
fn composite_layers_pass() {
    for c in Composite::ALL {
        let r = check_composite(c, 3, 3).unwrap();
        assert!(r.passed, "{} rel error {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn tiny_model_end_to_end() {
    let r = check_model(tiny_check_config(), 2).unwrap();
    assert!(r.passed, "model rel error {:e}", r.max_rel_error);
}
