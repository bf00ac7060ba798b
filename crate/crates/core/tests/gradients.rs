mod common;

use common::grads::{lenet_report, op_reports, TOLERANCE};
use kflo::autodiff::ParamClass;
use kflo::kflo::KfloConfig;

#[test]
fn every_op_matches_finite_differences() {
    for (name, report) in op_reports() {
        assert!(report.max_rel_error() <= TOLERANCE, "{name}: {report:#?}");
    }
}

#[test]
fn lenet_kflo_loss_matches_finite_differences() {
    let report = lenet_report(KfloConfig::new(2, 1.0).unwrap(), 0.1);
    assert!(report.max_rel_error() <= TOLERANCE, "{report:#?}");
    for class in [ParamClass::BaseKernel, ParamClass::Cascade, ParamClass::Bias] {
        assert!(report.max_for_class(class).is_some());
    }
    // Every tensor except the short bias vectors gets the full sample.
    assert!(report.params.iter().all(|p| p.coords == 32 || p.name.ends_with(".bias")));
}
