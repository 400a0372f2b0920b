//! Independent numerical oracles for the structural and convergence claims.
//!
//! Every check here certifies an identity through a route that does not
//! share code with the implementation it checks:
//!
//! - finite differences of energies against analytic gyroscopic matrices
//!   ([`workless_identity_check`]);
//! - two perturbed nonlinear flows against the integrated variational state
//!   ([`variational_flow_oracle`]);
//! - the tangent supply-rate inequality along a driven prolonged run
//!   ([`differential_passivity_check`]);
//! - reassembly of the closed-loop variational generator from its two
//!   subsystems and the joint coupling, against the direct construction
//!   ([`interconnection_decomposition_check`]).
//!
//! Checks report measured extremal errors and never panic on failure; the
//! aggregated [`CertificationReport`] is what the command-line `verify`
//! subcommand prints and gates its exit status on.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{ControllerConfig, FjrController, SineReference};
use crate::phmech::{
    self, models::TwoLinkArm, FjrModel, MechanicalModel, PhaseState, SingleJointParams,
};
use crate::sim::{simulate_prolonged, IntegratorConfig, SimError};
use crate::virtualsys::VirtualMechanicalSystem;

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Extremal measured error (meaning depends on the check).
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: measured <= threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }
}

/// Aggregated result of a verification run.
#[derive(Debug, Clone)]
pub struct CertificationReport {
    pub model: String,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub elapsed: std::time::Duration,
}

impl CertificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Plain-text rendering, one line per check.
    pub fn render(&self) -> String {
        let mut out = format!(
            "certification report — model: {}, seed: {}\n",
            self.model, self.seed
        );
        for c in &self.checks {
            out.push_str(&format!(
                "  [{}] {:<55} measured {:>12.4e}  (tol {:.1e})  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold,
                c.detail
            ));
        }
        let n_pass = self.checks.iter().filter(|c| c.passed).count();
        out.push_str(&format!(
            "overall: {} ({}/{} checks) in {:.2} s\n",
            if self.passed() { "PASS" } else { "FAIL" },
            n_pass,
            self.checks.len(),
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

fn rel_err(lhs: &DVector<f64>, rhs: &DVector<f64>) -> f64 {
    let denom = lhs.norm().max(rhs.norm());
    if denom < 1e-12 {
        (lhs - rhs).norm()
    } else {
        (lhs - rhs).norm() / denom
    }
}

fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, q: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(q.len());
    for i in 0..q.len() {
        let h = 1e-6 * q[i].abs().max(1.0);
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[i] += h;
        qm[i] -= h;
        g[i] = (f(&qp) - f(&qm)) / (2.0 * h);
    }
    g
}

/// Maximum relative errors of the three kinetic-structure identities over
/// random samples.
#[derive(Debug, Clone)]
pub struct IdentityReport {
    /// `½ q̇ᵀ Ṁ q̇ = q̇ᵀ ∂/∂q(½ q̇ᵀ M q̇)`.
    pub kinetic_rate: f64,
    /// `∂/∂q(½ pᵀ M⁻¹ p) = E(q,p) M⁻¹ p`.
    pub workless_gradient: f64,
    /// `∂/∂q(½ pᵀ M⁻¹ p) = −∂/∂q(½ q̇ᵀ M q̇)` under `p = M q̇`.
    pub legendre_pair: f64,
    pub samples: usize,
}

impl IdentityReport {
    pub fn max_error(&self) -> f64 {
        self.kinetic_rate
            .max(self.workless_gradient)
            .max(self.legendre_pair)
    }
}

/// Verifies the workless-force identities at random states, with every
/// gradient on the comparison side taken by central differences of the
/// energy. Momenta are additionally re-checked at twice the sampled value,
/// exercising the quadratic dependence per sample.
pub fn workless_identity_check(
    model: &dyn MechanicalModel,
    samples: usize,
    seed: u64,
) -> IdentityReport {
    let n = model.dof();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = IdentityReport {
        kinetic_rate: 0.0,
        workless_gradient: 0.0,
        legendre_pair: 0.0,
        samples,
    };
    for _ in 0..samples {
        let q = DVector::from_fn(n, |_, _| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let p_base = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        for scale in [1.0, 2.0] {
            let p = &p_base * scale;
            let m_inv = model.inertia(&q).try_inverse().expect("pd inertia");
            let qdot = &m_inv * &p;

            // Kinetic-rate identity, in velocity variables.
            let lhs19 = 0.5 * qdot.dot(&(model.inertia_directional_derivative(&q, &qdot) * &qdot));
            let grad_kin_v = fd_grad(|qq| 0.5 * qdot.dot(&(model.inertia(qq) * &qdot)), &q);
            let rhs19 = qdot.dot(&grad_kin_v);
            let denom = lhs19.abs().max(rhs19.abs()).max(1e-12);
            report.kinetic_rate = report.kinetic_rate.max((lhs19 - rhs19).abs() / denom);

            // Workless-force form of the momentum-side gradient.
            let x = PhaseState::new(q.clone(), p.clone()).unwrap();
            let e = phmech::workless_matrix(model, &x).expect("workless matrix");
            let rhs21 = &e * &qdot;
            let lhs21 = fd_grad(
                |qq| {
                    let mi = model.inertia(qq).try_inverse().expect("pd inertia");
                    0.5 * p.dot(&(mi * &p))
                },
                &q,
            );
            report.workless_gradient = report.workless_gradient.max(rel_err(&lhs21, &rhs21));

            // Legendre pair of the two kinetic gradients.
            let rhs22 = -fd_grad(|qq| 0.5 * qdot.dot(&(model.inertia(qq) * &qdot)), &q);
            report.legendre_pair = report.legendre_pair.max(rel_err(&lhs21, &rhs22));
        }
    }
    report
}

/// Per-perturbation-size result of the two-trajectory flow comparison.
#[derive(Debug, Clone)]
pub struct FlowOracleReport {
    pub epsilons: Vec<f64>,
    /// Relative errors `‖(ψ(T, x₀+εv) − ψ(T, x₀))/ε − δx(T)‖ / ‖δx(T)‖`.
    pub errors: Vec<f64>,
    /// Log-log slope of error against ε (≈ 1 for a smooth flow).
    pub observed_order: f64,
}

/// Integrates, in lockstep, the closed-loop plant, the virtual system from
/// the same start, the variational state along it, and one perturbed
/// virtual flow per `ε`; then compares scaled flow differences at `T`
/// against the integrated variational state.
pub fn variational_flow_oracle(
    ctrl: &FjrController,
    x0: &PhaseState,
    direction: &DVector<f64>,
    epsilons: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<FlowOracleReport, SimError> {
    let model = ctrl.model();
    let vsys = VirtualMechanicalSystem::new(model);
    let n = model.dof();
    let ne = epsilons.len();
    assert_eq!(direction.len(), 2 * n);
    let omega = DVector::zeros(model.n_motor());

    let mut y0 = DVector::zeros((3 + ne) * 2 * n);
    let x0v = x0.to_vector();
    y0.rows_mut(0, 2 * n).copy_from(&x0v);
    y0.rows_mut(2 * n, 2 * n).copy_from(&x0v);
    y0.rows_mut(4 * n, 2 * n).copy_from(direction);
    for (i, eps) in epsilons.iter().enumerate() {
        y0.rows_mut((3 + i) * 2 * n, 2 * n)
            .copy_from(&(&x0v + direction * *eps));
    }

    let integ = IntegratorConfig::new(dt, t_end).with_stride(usize::MAX / 2);
    let mut last = y0.clone();
    let rhs = |t: f64, y: &DVector<f64>| -> Result<DVector<f64>, SimError> {
        let x = PhaseState::from_vector(&y.rows(0, 2 * n).into_owned());
        let x_v = PhaseState::from_vector(&y.rows(2 * n, 2 * n).into_owned());
        let dx = y.rows(4 * n, 2 * n).into_owned();

        let mut dy = DVector::zeros((3 + ne) * 2 * n);
        let dec = ctrl.control(t, &x, &x, &omega);
        dy.rows_mut(0, 2 * n)
            .copy_from(&phmech::ph_vector_field(model, &x, &dec.u)?.to_vector());

        let (dec_v, sens) = ctrl.control_with_sensitivities(t, &x_v, &x, &omega)?;
        dy.rows_mut(2 * n, 2 * n)
            .copy_from(&vsys.vector_field(&x_v, &x, &dec_v.u)?.to_vector());
        let open_gen = vsys.variational_generator(&x_v, &x)?;
        let du = &sens.du_dxv * &dx;
        let b = model.input_matrix(&x.q);
        let mut ddx = open_gen * &dx;
        ddx.rows_mut(n, n).axpy(1.0, &(b * du), 1.0);
        dy.rows_mut(4 * n, 2 * n).copy_from(&ddx);

        for i in 0..ne {
            let xe = PhaseState::from_vector(&y.rows((3 + i) * 2 * n, 2 * n).into_owned());
            let dec_e = ctrl.control(t, &xe, &x, &omega);
            dy.rows_mut((3 + i) * 2 * n, 2 * n)
                .copy_from(&vsys.vector_field(&xe, &x, &dec_e.u)?.to_vector());
        }
        Ok(dy)
    };
    crate::sim::integrate_raw(&integ, y0, rhs, |_t, y| {
        last.copy_from(y);
        Ok(())
    })?;

    let x_v_final = last.rows(2 * n, 2 * n).into_owned();
    let dx_final = last.rows(4 * n, 2 * n).into_owned();
    let mut errors = Vec::with_capacity(ne);
    for (i, eps) in epsilons.iter().enumerate() {
        let fd = (last.rows((3 + i) * 2 * n, 2 * n).into_owned() - &x_v_final) / *eps;
        errors.push((&fd - &dx_final).norm() / dx_final.norm().max(1e-300));
    }
    // Slope of log error against log ε over consecutive pairs.
    let mut order = 0.0;
    let mut pairs = 0;
    for i in 1..ne {
        let de = (errors[i - 1] / errors[i]).ln();
        let dl = (epsilons[i - 1] / epsilons[i]).ln();
        if dl.abs() > 0.0 && errors[i] > 0.0 {
            order += de / dl;
            pairs += 1;
        }
    }
    Ok(FlowOracleReport {
        epsilons: epsilons.to_vec(),
        errors,
        observed_order: if pairs > 0 { order / pairs as f64 } else { f64::NAN },
    })
}

/// Result of the tangent supply-rate check.
#[derive(Debug, Clone)]
pub struct PassivityReport {
    /// Worst pointwise value of `dV/dt − δyᵀδω` (should be ≤ 0).
    pub max_pointwise_violation: f64,
    /// Trapezoid integral of the same defect over the run (should be ≤ 0).
    pub integral_defect: f64,
    /// Worst deviation of `V` from the sum of link and motor storage parts.
    pub additivity_residual: f64,
    /// Worst off-block entry of the storage metric (structurally zero).
    pub metric_cross_coupling: f64,
}

/// Runs the prolonged closed loop under the tangent input `δω(t)` and
/// checks the supply-rate inequality pointwise and in integral form, plus
/// additivity of the storage across the link/motor split.
pub fn differential_passivity_check(
    ctrl: &FjrController,
    integ: &IntegratorConfig,
    x0: &PhaseState,
    dx0: &DVector<f64>,
    tangent_input: &dyn Fn(f64) -> DVector<f64>,
) -> Result<PassivityReport, SimError> {
    let rec = simulate_prolonged(ctrl, integ, x0, dx0, None, Some(tangent_input))?;
    let ed = ctrl.error_dynamics();
    let mut max_violation = f64::NEG_INFINITY;
    let mut additivity = 0.0f64;
    let mut defects = Vec::with_capacity(rec.t.len());
    for k in 0..rec.t.len() {
        let supply = rec.tangent_output[k].dot(&rec.tangent_input[k]);
        let defect = rec.storage_rate[k] - supply;
        max_violation = max_violation.max(defect);
        defects.push(defect);
        let (v_l, v_m) = ed.storage_parts(&rec.tangent_err[k]);
        additivity = additivity.max((rec.storage[k] - (v_l + v_m)).abs());
    }
    let mut integral = 0.0;
    for k in 1..rec.t.len() {
        integral += 0.5 * (defects[k] + defects[k - 1]) * (rec.t[k] - rec.t[k - 1]);
    }
    let g = ed.metric();
    let n = ctrl.model().dof();
    let mut cross = 0.0f64;
    for i in 0..2 * n {
        for j in 0..2 * n {
            let link_row = i < ctrl.model().n_link() || (i >= n && i < n + ctrl.model().n_link());
            let link_col = j < ctrl.model().n_link() || (j >= n && j < n + ctrl.model().n_link());
            if link_row != link_col {
                cross = cross.max(g[(i, j)].abs());
            }
        }
    }
    Ok(PassivityReport {
        max_pointwise_violation: max_violation,
        integral_defect: integral,
        additivity_residual: additivity,
        metric_cross_coupling: cross,
    })
}

/// Result of rebuilding the closed-loop generator from its parts.
#[derive(Debug, Clone)]
pub struct InterconnectReport {
    /// Largest entry difference between the reconstruction and the direct
    /// generator.
    pub reconstruction_error: f64,
    /// `‖J + Jᵀ‖` of the closed-loop interconnection (exactly zero).
    pub skew_residual: f64,
    /// `‖R − Rᵀ‖` of the closed-loop damping factor (exactly zero).
    pub symmetry_residual: f64,
}

/// Reassembles the closed-loop variational generator from the link and
/// motor subsystem generators coupled through the joint stiffness, and
/// compares it against the direct construction.
pub fn interconnection_decomposition_check(
    model: &FjrModel,
    cfg: &ControllerConfig,
) -> Result<InterconnectReport, crate::control::SynthesisError> {
    let ed = crate::control::ErrorDynamics::new(model, cfg)?;
    let direct = ed.generator();
    let nl = model.n_link();
    let nm = model.n_motor();
    let q0 = DVector::zeros(nl + nm);
    let m = model.inertia(&q0);
    let d = model.damping(&q0);
    let recon = reconstruct_generator(
        &cfg.link.lambda,
        &cfg.link.metric,
        &cfg.link.kd,
        &m.view((0, 0), (nl, nl)).into_owned(),
        &d.view((0, 0), (nl, nl)).into_owned(),
        &cfg.motor.lambda,
        &cfg.motor.metric,
        &cfg.motor.kd,
        &m.view((nl, nl), (nm, nm)).into_owned(),
        &d.view((nl, nl), (nm, nm)).into_owned(),
        model.stiffness(),
    );
    let j = ed.interconnection();
    let r = ed.damping_factor();
    Ok(InterconnectReport {
        reconstruction_error: (direct - recon).amax(),
        skew_residual: (j.clone() + j.transpose()).amax(),
        symmetry_residual: (r.clone() - r.transpose()).amax(),
    })
}

/// Composite generator built from two stand-alone subsystem error dynamics
/// and the power-preserving joint coupling: the link momentum row receives
/// the motor position output through `K Π_m⁻¹`, the motor position row
/// receives the link momentum output through `−Π_m⁻¹ Kᵀ`, and the tangent
/// input enters the motor momentum row. A zero stiffness decouples the
/// subsystems exactly.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_generator(
    lambda_l: &DMatrix<f64>,
    pi_l: &DMatrix<f64>,
    kd_l: &DMatrix<f64>,
    m_l: &DMatrix<f64>,
    d_l: &DMatrix<f64>,
    lambda_m: &DMatrix<f64>,
    pi_m: &DMatrix<f64>,
    kd_m: &DMatrix<f64>,
    m_m: &DMatrix<f64>,
    d_m: &DMatrix<f64>,
    stiffness: &DMatrix<f64>,
) -> DMatrix<f64> {
    let nl = lambda_l.nrows();
    let nm = lambda_m.nrows();
    let n = nl + nm;
    let m_l_inv = m_l.clone().cholesky().unwrap().inverse();
    let m_m_inv = m_m.clone().cholesky().unwrap().inverse();
    let pi_m_inv = pi_m.clone().cholesky().unwrap().inverse();

    // Subsystem generators over (q̃, σ).
    let sub = |lambda: &DMatrix<f64>,
               pi: &DMatrix<f64>,
               kd: &DMatrix<f64>,
               m_inv: &DMatrix<f64>,
               d: &DMatrix<f64>|
     -> DMatrix<f64> {
        let nn = lambda.nrows();
        let mut a = DMatrix::zeros(2 * nn, 2 * nn);
        let pi_inv = pi.clone().cholesky().unwrap().inverse();
        a.view_mut((0, 0), (nn, nn))
            .copy_from(&(-(lambda * &pi_inv) * pi));
        a.view_mut((0, nn), (nn, nn)).copy_from(m_inv);
        a.view_mut((nn, 0), (nn, nn)).copy_from(&(-pi));
        a.view_mut((nn, nn), (nn, nn))
            .copy_from(&(-(d + kd) * m_inv));
        a
    };
    let a_l = sub(lambda_l, pi_l, kd_l, &m_l_inv, d_l);
    let a_m = sub(lambda_m, pi_m, kd_m, &m_m_inv, d_m);

    // Assemble on the composite basis (q̃_l, q̃_m, σ_l, σ_m).
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (nl, nl)).copy_from(&a_l.view((0, 0), (nl, nl)));
    a.view_mut((0, n), (nl, nl)).copy_from(&a_l.view((0, nl), (nl, nl)));
    a.view_mut((n, 0), (nl, nl)).copy_from(&a_l.view((nl, 0), (nl, nl)));
    a.view_mut((n, n), (nl, nl)).copy_from(&a_l.view((nl, nl), (nl, nl)));
    a.view_mut((nl, nl), (nm, nm)).copy_from(&a_m.view((0, 0), (nm, nm)));
    a.view_mut((nl, n + nl), (nm, nm)).copy_from(&a_m.view((0, nm), (nm, nm)));
    a.view_mut((n + nl, nl), (nm, nm)).copy_from(&a_m.view((nm, 0), (nm, nm)));
    a.view_mut((n + nl, n + nl), (nm, nm)).copy_from(&a_m.view((nm, nm), (nm, nm)));

    // Coupling through the outputs: δū_l2 = K Π_m⁻¹ · (Π_m δq̃_m) and
    // δū_m1 = −Π_m⁻¹ Kᵀ · (M_l⁻¹ δσ_l).
    a.view_mut((n, nl), (nl, nm))
        .copy_from(&((stiffness * &pi_m_inv) * pi_m));
    a.view_mut((nl, n), (nm, nl))
        .copy_from(&(-(&pi_m_inv * stiffness.transpose()) * &m_l_inv));
    a
}

/// Model selector for [`run_all_checks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyModel {
    /// The bundled single-joint benchmark with its controller.
    SingleJoint,
    /// The two-link varying-inertia fixture (structure identities only).
    TwoLink,
    /// The fixture with a deliberately sign-flipped inertia rate; the
    /// identity checks must fail on it, which exercises the checker itself.
    TwoLinkBroken,
}

impl VerifyModel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "table1" => Some(Self::SingleJoint),
            "two-link" => Some(Self::TwoLink),
            "two-link-broken" => Some(Self::TwoLinkBroken),
            _ => None,
        }
    }
}

/// Wrapper flipping the sign of the inertia rate; every workless-force
/// identity breaks with it.
pub struct FlippedInertiaRate<M: MechanicalModel>(pub M);

impl<M: MechanicalModel> MechanicalModel for FlippedInertiaRate<M> {
    fn dof(&self) -> usize {
        self.0.dof()
    }
    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.0.inertia(q)
    }
    fn inertia_directional_derivative(&self, q: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        -self.0.inertia_directional_derivative(q, v)
    }
    fn damping(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.0.damping(q)
    }
    fn potential(&self, q: &DVector<f64>) -> f64 {
        self.0.potential(q)
    }
    fn potential_gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        self.0.potential_gradient(q)
    }
    fn potential_hessian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.0.potential_hessian(q)
    }
    fn input_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.0.input_matrix(q)
    }
}

/// Runs every check applicable to the selected model and aggregates the
/// outcome. All randomness is drawn from the given seed.
pub fn run_all_checks(selector: VerifyModel, seed: u64) -> CertificationReport {
    let start = std::time::Instant::now();
    let mut checks = Vec::new();
    let name;
    match selector {
        VerifyModel::TwoLink | VerifyModel::TwoLinkBroken => {
            name = if selector == VerifyModel::TwoLink {
                "two-link"
            } else {
                "two-link-broken"
            };
            let report = if selector == VerifyModel::TwoLink {
                workless_identity_check(&TwoLinkArm::default(), 1000, seed)
            } else {
                workless_identity_check(&FlippedInertiaRate(TwoLinkArm::default()), 1000, seed)
            };
            checks.push(CheckResult::new(
                "kinetic-energy rate identity",
                report.kinetic_rate,
                1e-6,
                format!("{} samples", report.samples),
            ));
            checks.push(CheckResult::new(
                "workless-force gradient identity",
                report.workless_gradient,
                1e-6,
                "finite-difference oracle",
            ));
            checks.push(CheckResult::new(
                "kinetic gradient sign pair",
                report.legendre_pair,
                1e-6,
                "both sides by differences",
            ));
            let model = TwoLinkArm::default();
            let vsys = VirtualMechanicalSystem::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut skew = 0.0f64;
            for _ in 0..100 {
                let x = PhaseState::new(
                    DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0)),
                    DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                )
                .unwrap();
                let j = vsys.interconnection(&x).unwrap();
                skew = skew.max((j.clone() + j.transpose()).amax());
            }
            checks.push(CheckResult::new(
                "gyroscopic interconnection skew-symmetry",
                skew,
                0.0,
                "exact by construction",
            ));
        }
        VerifyModel::SingleJoint => {
            name = "table1";
            let model = SingleJointParams::default().build();
            let cfg = ControllerConfig::single_joint_defaults();
            let traj = SineReference::scalar(std::f64::consts::FRAC_PI_4, 1.0, 0.0, 0.0);
            let ctrl = FjrController::new(&model, &cfg, &traj).expect("benchmark synthesis");

            // Constant inertia: the workless matrix must vanish identically.
            let report = workless_identity_check(&model, 200, seed);
            checks.push(CheckResult::new(
                "workless-force identities (constant inertia)",
                report.max_error(),
                1e-6,
                format!("{} samples", report.samples),
            ));

            // Two-trajectory flow oracle on the nonlinear closed loop. The
            // one-second horizon checks the accuracy clause; the linear
            // ε-scaling is measured over a short horizon where the
            // contraction has not yet pushed the flow difference into the
            // finite-difference cancellation floor.
            let x0 = PhaseState::zeros(2);
            let dir = DVector::from_vec(vec![1.0, -0.5, 0.02, 0.01]);
            let flow = variational_flow_oracle(&ctrl, &x0, &dir, &[1e-4], 1.0, 1e-4)
                .expect("flow oracle run");
            checks.push(CheckResult::new(
                "variational state vs two-trajectory differences",
                flow.errors[0],
                1e-3,
                "1 s horizon, ε = 1e-4",
            ));
            let scaling =
                variational_flow_oracle(&ctrl, &x0, &dir, &[1e-2, 1e-3, 1e-4, 1e-5], 0.05, 1e-4)
                    .expect("flow scaling run");
            checks.push(CheckResult::new(
                "flow-difference convergence order ≈ 1",
                (scaling.observed_order - 1.0).abs(),
                0.3,
                format!(
                    "errors {:.2e}/{:.2e}/{:.2e}/{:.2e} over three decades",
                    scaling.errors[0], scaling.errors[1], scaling.errors[2], scaling.errors[3]
                ),
            ));

            // Affine variant: variational and differenced flows coincide.
            let linear_model = SingleJointParams::default().build_linear();
            let ctrl_lin = FjrController::new(&linear_model, &cfg, &traj).expect("synthesis");
            let flow_lin =
                variational_flow_oracle(&ctrl_lin, &x0, &dir, &[1e-2, 1e-3], 0.2, 1e-4)
                    .expect("affine flow oracle");
            checks.push(CheckResult::new(
                "affine closed loop: differenced flow is exact",
                flow_lin.errors.iter().cloned().fold(0.0, f64::max),
                1e-9,
                "quadratic link potential",
            ));

            // Supply-rate inequality under tangent-input injection.
            let integ = IntegratorConfig::new(1e-4, 10.0).with_stride(10);
            let dw = |t: f64| DVector::from_element(1, 0.1 * (5.0 * t).sin());
            let pass = differential_passivity_check(&ctrl, &integ, &x0, &dir, &dw)
                .expect("passivity run");
            checks.push(CheckResult::new(
                "tangent supply-rate inequality (pointwise)",
                pass.max_pointwise_violation,
                1e-8,
                "dV/dt − δyᵀδω along 10 s",
            ));
            checks.push(CheckResult::new(
                "tangent supply-rate inequality (integral)",
                pass.integral_defect,
                1e-8,
                "trapezoid quadrature",
            ));
            checks.push(CheckResult::new(
                "storage additivity across the joint split",
                pass.additivity_residual.max(pass.metric_cross_coupling),
                1e-12,
                "block-diagonal metric",
            ));

            // Contraction at the certified rate with δω = 0.
            let rec = simulate_prolonged(&ctrl, &integ, &x0, &dir, None, None)
                .expect("contraction run");
            let beta = ctrl.certificate().beta;
            let v0 = rec.storage[0];
            let mut bound_excess = 0.0f64;
            let mut rate_excess = f64::NEG_INFINITY;
            for k in 0..rec.t.len() {
                let bound = v0 * (-2.0 * beta * rec.t[k]).exp() * 1.05;
                bound_excess = bound_excess.max(rec.storage[k] - bound);
                rate_excess = rate_excess.max(rec.storage_rate[k] + 2.0 * beta * rec.storage[k]);
            }
            checks.push(CheckResult::new(
                "storage below certified exponential envelope",
                bound_excess,
                0.0,
                format!("rate {beta:.4}"),
            ));
            checks.push(CheckResult::new(
                "pointwise contraction margin",
                rate_excess,
                1e-9,
                "dV/dt + 2βV at every sample",
            ));
            let est = rec.summary.decay.as_ref().expect("decay fit");
            checks.push(CheckResult::new(
                "measured decay rate at least the certified one",
                beta - est.beta_hat,
                0.0,
                format!("measured {:.4}", est.beta_hat),
            ));

            // Interconnection reconstruction matches the direct generator.
            let inter =
                interconnection_decomposition_check(&model, &cfg).expect("interconnection");
            checks.push(CheckResult::new(
                "interconnection reconstruction of the generator",
                inter.reconstruction_error,
                1e-10,
                "subsystems + joint coupling",
            ));
            checks.push(CheckResult::new(
                "closed-loop interconnection skew-symmetry",
                inter.skew_residual,
                0.0,
                "exact by construction",
            ));
            checks.push(CheckResult::new(
                "closed-loop damping factor symmetry",
                inter.symmetry_residual,
                0.0,
                "exact by construction",
            ));
        }
    }
    CertificationReport {
        model: name.to_string(),
        seed,
        checks,
        elapsed: start.elapsed(),
    }
}

#[cfg(test)]
mod tests;
