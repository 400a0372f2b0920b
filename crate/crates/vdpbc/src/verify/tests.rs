use nalgebra::{DMatrix, DVector};

use super::*;
use crate::control::{ControllerConfig, FjrController, SineReference};
use crate::phmech::models::TwoLinkArm;
use crate::phmech::SingleJointParams;

fn controller_fixture<'a>(
    model: &'a FjrModel,
    cfg: &'a ControllerConfig,
    traj: &'a SineReference,
) -> FjrController<'a> {
    FjrController::new(model, cfg, traj).unwrap()
}

#[test]
fn workless_identities_hold_on_the_varying_inertia_fixture() {
    let report = workless_identity_check(&TwoLinkArm::default(), 1000, 42);
    assert!(report.kinetic_rate < 1e-6, "{:?}", report);
    assert!(report.workless_gradient < 1e-6, "{:?}", report);
    assert!(report.legendre_pair < 1e-6, "{:?}", report);
}

#[test]
fn workless_identities_vanish_for_constant_inertia() {
    let model = SingleJointParams::default().build();
    let report = workless_identity_check(&model, 100, 7);
    assert_eq!(report.kinetic_rate, 0.0);
    // The gradient sides are finite-difference zeroes.
    assert!(report.workless_gradient < 1e-9);
}

#[test]
fn flipped_inertia_rate_is_caught() {
    let report = workless_identity_check(&FlippedInertiaRate(TwoLinkArm::default()), 100, 42);
    assert!(report.max_error() > 1e-2, "{:?}", report);
}

#[test]
fn flow_oracle_zero_direction_is_degenerate_zero() {
    let model = SingleJointParams::default().build();
    let cfg = ControllerConfig::single_joint_defaults();
    let traj = SineReference::scalar(std::f64::consts::FRAC_PI_4, 1.0, 0.0, 0.0);
    let ctrl = controller_fixture(&model, &cfg, &traj);
    let report = variational_flow_oracle(
        &ctrl,
        &PhaseState::zeros(2),
        &DVector::zeros(4),
        &[1e-3],
        0.2,
        1e-3,
    )
    .unwrap();
    assert_eq!(report.errors[0], 0.0);
}

#[test]
fn flow_oracle_error_scales_linearly_on_the_nonlinear_loop() {
    // Over a short horizon the contraction has not yet pushed the flow
    // difference into the cancellation floor, and the truncation term
    // dominates through three full decades of ε.
    let model = SingleJointParams::default().build();
    let cfg = ControllerConfig::single_joint_defaults();
    let traj = SineReference::scalar(std::f64::consts::FRAC_PI_4, 1.0, 0.0, 0.0);
    let ctrl = controller_fixture(&model, &cfg, &traj);
    let dir = DVector::from_vec(vec![1.0, -0.5, 0.02, 0.01]);
    let report = variational_flow_oracle(
        &ctrl,
        &PhaseState::zeros(2),
        &dir,
        &[1e-2, 1e-3, 1e-4, 1e-5],
        0.05,
        1e-4,
    )
    .unwrap();
    for w in report.errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((5.0..20.0).contains(&ratio), "decade ratio {ratio}");
    }
    assert!((report.observed_order - 1.0).abs() < 0.3);

    // At the one-second horizon the strong contraction leaves a tiny flow
    // difference; the comparison still resolves it well below 1e-3.
    let long = variational_flow_oracle(&ctrl, &PhaseState::zeros(2), &dir, &[1e-4], 1.0, 1e-4)
        .unwrap();
    assert!(long.errors[0] < 1e-3, "{:?}", long.errors);
}

#[test]
fn flow_oracle_is_exact_for_the_affine_loop() {
    // The perturbed-flow difference of an affine system is linear in ε and
    // matches the variational state up to roundoff amplified by 1/ε.
    let model = SingleJointParams::default().build_linear();
    let cfg = ControllerConfig::single_joint_defaults();
    let traj = SineReference::scalar(std::f64::consts::FRAC_PI_4, 1.0, 0.0, 0.0);
    let ctrl = controller_fixture(&model, &cfg, &traj);
    let dir = DVector::from_vec(vec![1.0, -0.5, 0.02, 0.01]);
    let report = variational_flow_oracle(
        &ctrl,
        &PhaseState::zeros(2),
        &dir,
        &[1e-2, 1e-3],
        0.2,
        1e-4,
    )
    .unwrap();
    for e in &report.errors {
        assert!(*e < 1e-9, "{:?}", report.errors);
    }
}

#[test]
fn passivity_without_injection_reduces_to_decay() {
    let model = SingleJointParams::default().build();
    let cfg = ControllerConfig::single_joint_defaults();
    let traj = SineReference::scalar(std::f64::consts::FRAC_PI_4, 1.0, 0.0, 0.0);
    let ctrl = controller_fixture(&model, &cfg, &traj);
    let integ = IntegratorConfig::new(1e-4, 1.0).with_stride(10);
    let dir = DVector::from_vec(vec![1.0, -0.5, 0.02, 0.01]);
    let zero = |_t: f64| DVector::zeros(1);
    let report =
        differential_passivity_check(&ctrl, &integ, &PhaseState::zeros(2), &dir, &zero).unwrap();
    assert!(report.max_pointwise_violation <= 1e-12);
    assert!(report.integral_defect <= 0.0);
}

#[test]
fn passivity_holds_under_sinusoidal_injection() {
    let model = SingleJointParams::default().build();
    let cfg = ControllerConfig::single_joint_defaults();
    let traj = SineReference::scalar(std::f64::consts::FRAC_PI_4, 1.0, 0.0, 0.0);
    let ctrl = controller_fixture(&model, &cfg, &traj);
    let integ = IntegratorConfig::new(1e-4, 2.0).with_stride(10);
    let dir = DVector::from_vec(vec![1.0, -0.5, 0.02, 0.01]);
    let dw = |t: f64| DVector::from_element(1, 0.1 * (5.0 * t).sin());
    let report =
        differential_passivity_check(&ctrl, &integ, &PhaseState::zeros(2), &dir, &dw).unwrap();
    assert!(
        report.max_pointwise_violation <= 1e-8,
        "violation {:.3e}",
        report.max_pointwise_violation
    );
    assert!(report.additivity_residual <= 1e-12);
    assert_eq!(report.metric_cross_coupling, 0.0);
}

#[test]
fn interconnection_reconstruction_matches_direct_generator() {
    let model = SingleJointParams::default().build();
    let cfg = ControllerConfig::single_joint_defaults();
    let report = interconnection_decomposition_check(&model, &cfg).unwrap();
    assert!(
        report.reconstruction_error <= 1e-10,
        "reconstruction error {:.3e}",
        report.reconstruction_error
    );
    assert_eq!(report.skew_residual, 0.0);
    assert_eq!(report.symmetry_residual, 0.0);
}

#[test]
fn zero_stiffness_decouples_the_reconstruction() {
    let cfg = ControllerConfig::single_joint_defaults();
    let a = reconstruct_generator(
        &cfg.link.lambda,
        &cfg.link.metric,
        &cfg.link.kd,
        &DMatrix::from_element(1, 1, 0.031),
        &DMatrix::from_element(1, 1, 0.2),
        &cfg.motor.lambda,
        &cfg.motor.metric,
        &cfg.motor.kd,
        &DMatrix::from_element(1, 1, 0.004),
        &DMatrix::from_element(1, 1, 0.007),
        &DMatrix::zeros(1, 1),
    );
    // Off-subsystem coupling blocks vanish.
    assert_eq!(a[(2, 1)], 0.0);
    assert_eq!(a[(1, 2)], 0.0);
    assert_eq!(a[(0, 1)], 0.0);
    assert_eq!(a[(3, 0)], 0.0);
}

#[test]
fn two_link_certification_passes_and_broken_fails() {
    let good = run_all_checks(VerifyModel::TwoLink, 42);
    assert!(good.passed(), "\n{}", good.render());
    let bad = run_all_checks(VerifyModel::TwoLinkBroken, 42);
    assert!(!bad.passed());
    // The rendering carries one line per check.
    assert_eq!(
        bad.render().matches("FAIL").count() >= 2,
        true,
        "\n{}",
        bad.render()
    );
}

#[test]
fn verify_model_parsing() {
    assert_eq!(VerifyModel::parse("table1"), Some(VerifyModel::SingleJoint));
    assert_eq!(VerifyModel::parse("two-link"), Some(VerifyModel::TwoLink));
    assert_eq!(
        VerifyModel::parse("two-link-broken"),
        Some(VerifyModel::TwoLinkBroken)
    );
    assert_eq!(VerifyModel::parse("bogus"), None);
}
