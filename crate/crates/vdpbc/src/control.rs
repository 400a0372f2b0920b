//! Tracking controller synthesis for flexible-joint robots.
//!
//! The controller has two stages. An inner *link* law computes the torque
//! `u_l` that would make a directly-driven link track the reference; since
//! only the motors are actuated, that torque is realized by asking the
//! elastic joint to produce it: the motor position reference is
//! `q_md = q_l + K⁻¹ u_l`, and an outer *motor* law tracks `q_md`.
//!
//! Both stages use the same ingredients: a position error `q̃`, an auxiliary
//! momentum reference `p_r = M (q̇_d − Λ q̃)` whose mismatch `σ = p − p_r`
//! acts as a sliding-like coordinate, feedforward that cancels the model
//! forces along the reference, and feedback `−Π q̃ − K_d M⁻¹ σ`.
//!
//! In the error coordinates `(q̃_l, q̃_m, σ_l, σ_m)` the closed loop becomes
//! exactly linear (for configuration-independent inertia), generated by
//! `[J − R]·diag(Π, M⁻¹)` with a skew `J` and a symmetric `R`; see
//! [`ErrorDynamics`]. The quadratic storage `V = ½‖q̃‖²_Π + ½‖σ‖²_{M⁻¹}`
//! then decays at a guaranteed exponential rate, certified by
//! [`ControllerConfig::validate`].
//!
//! The motor law needs time derivatives of `q_md` up to second order, which
//! involve link acceleration and jerk. These are computed analytically by
//! differentiating the model equations of motion — the controller reads only
//! `(q, p)` — with an optional finite-difference fallback that numerically
//! differentiates the reference chain instead.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::phmech::{FjrModel, MechanicalModel, PhaseState};

/// Errors raised while synthesizing or evaluating the controller.
#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("{name} must be symmetric")]
    NotSymmetric { name: &'static str },
    #[error("{name} must be positive definite")]
    NotPositiveDefinite { name: &'static str },
    #[error("gain certificate violated: {inequality}")]
    CertificateViolated { inequality: String },
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("the analytic reference-derivative chain requires configuration-independent inertia")]
    VaryingInertia,
    #[error("the prolonged dynamics require the analytic derivative mode")]
    AnalyticModeRequired,
}

/// A reference signal with analytic time derivatives up to fourth order.
pub trait ReferenceTrajectory: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, t: f64) -> TrajectoryPoint;
}

/// One sample of the reference and its first four time derivatives.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub pos: DVector<f64>,
    pub vel: DVector<f64>,
    pub acc: DVector<f64>,
    pub jerk: DVector<f64>,
    pub snap: DVector<f64>,
}

/// Per-coordinate sinusoid `q_d(t) = A sin(ω t + φ) + c`.
#[derive(Debug, Clone)]
pub struct SineReference {
    amplitude: DVector<f64>,
    omega: DVector<f64>,
    phase: DVector<f64>,
    offset: DVector<f64>,
}

impl SineReference {
    pub fn new(
        amplitude: DVector<f64>,
        omega: DVector<f64>,
        phase: DVector<f64>,
        offset: DVector<f64>,
    ) -> Self {
        let n = amplitude.len();
        assert!(omega.len() == n && phase.len() == n && offset.len() == n);
        Self {
            amplitude,
            omega,
            phase,
            offset,
        }
    }

    pub fn scalar(amplitude: f64, omega: f64, phase: f64, offset: f64) -> Self {
        Self::new(
            DVector::from_element(1, amplitude),
            DVector::from_element(1, omega),
            DVector::from_element(1, phase),
            DVector::from_element(1, offset),
        )
    }

    /// Constant reference `q_d ≡ c`.
    pub fn constant(c: &DVector<f64>) -> Self {
        let n = c.len();
        Self::new(
            DVector::zeros(n),
            DVector::zeros(n),
            DVector::zeros(n),
            c.clone(),
        )
    }
}

impl ReferenceTrajectory for SineReference {
    fn dim(&self) -> usize {
        self.amplitude.len()
    }

    fn sample(&self, t: f64) -> TrajectoryPoint {
        let n = self.dim();
        let mut out = TrajectoryPoint {
            pos: DVector::zeros(n),
            vel: DVector::zeros(n),
            acc: DVector::zeros(n),
            jerk: DVector::zeros(n),
            snap: DVector::zeros(n),
        };
        for i in 0..n {
            let (a, w, ph) = (self.amplitude[i], self.omega[i], self.phase[i]);
            let arg = w * t + ph;
            let (s, c) = arg.sin_cos();
            out.pos[i] = a * s + self.offset[i];
            out.vel[i] = a * w * c;
            out.acc[i] = -a * w * w * s;
            out.jerk[i] = -a * w * w * w * c;
            out.snap[i] = a * w * w * w * w * s;
        }
        out
    }
}

/// Gains of one tracking stage: position-error slope `Λ`, storage metric
/// weight `Π`, and damping injection `K_d`. All symmetric positive definite.
#[derive(Debug, Clone)]
pub struct SubsystemGains {
    pub lambda: DMatrix<f64>,
    pub metric: DMatrix<f64>,
    pub kd: DMatrix<f64>,
}

impl SubsystemGains {
    pub fn scalar(lambda: f64, metric: f64, kd: f64) -> Self {
        Self {
            lambda: DMatrix::from_element(1, 1, lambda),
            metric: DMatrix::from_element(1, 1, metric),
            kd: DMatrix::from_element(1, 1, kd),
        }
    }
}

/// How the motor-reference derivatives are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeMode {
    /// Differentiate the model equations of motion; exact for
    /// configuration-independent inertia.
    Analytic,
    /// Central differences of the reference chain over one-step state
    /// predictions. Documents the accuracy cost of not having a model for
    /// the derivative chain; the prolonged dynamics are unavailable here.
    FiniteDifference { step: f64 },
}

/// Full configuration of the two-stage controller.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub link: SubsystemGains,
    pub motor: SubsystemGains,
    pub derivative_mode: DerivativeMode,
}

impl ControllerConfig {
    pub fn new(link: SubsystemGains, motor: SubsystemGains) -> Self {
        Self {
            link,
            motor,
            derivative_mode: DerivativeMode::Analytic,
        }
    }

    /// Gain set used by the bundled single-joint scenarios.
    pub fn single_joint_defaults() -> Self {
        Self::new(
            SubsystemGains::scalar(10.0, 20.0, 0.6),
            SubsystemGains::scalar(15.0, 60.0, 0.3),
        )
    }

    pub fn with_derivative_mode(mut self, mode: DerivativeMode) -> Self {
        self.derivative_mode = mode;
        self
    }

    /// Checks shape, symmetry and definiteness of every gain, derives the
    /// per-stage contraction rates, and verifies the metric inequality
    /// `Π Λ + Λᵀ Π ⪰ 2 β Π` that the storage-decay argument rests on.
    pub fn validate(&self, model: &FjrModel) -> Result<RateCertificate, SynthesisError> {
        let nl = model.n_link();
        let nm = model.n_motor();
        for (name, m, dim) in [
            ("link lambda", &self.link.lambda, nl),
            ("link metric", &self.link.metric, nl),
            ("link damping injection", &self.link.kd, nl),
            ("motor lambda", &self.motor.lambda, nm),
            ("motor metric", &self.motor.metric, nm),
            ("motor damping injection", &self.motor.kd, nm),
        ] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(SynthesisError::DimensionMismatch {
                    what: "gain matrix",
                    expected: dim,
                    got: m.nrows(),
                });
            }
            let scale = m.norm().max(1.0);
            if (m - m.transpose()).norm() > 1e-12 * scale {
                return Err(SynthesisError::NotSymmetric { name });
            }
            if m.clone().cholesky().is_none() {
                return Err(SynthesisError::NotPositiveDefinite { name });
            }
        }
        // The closed-loop position damping factor Λ Π⁻¹ must be symmetric
        // for the error dynamics to keep the skew/symmetric split.
        for (name, gains) in [("link", &self.link), ("motor", &self.motor)] {
            let pi_inv = gains.metric.clone().cholesky().unwrap().inverse();
            let lp = &gains.lambda * &pi_inv;
            if (&lp - lp.transpose()).norm() > 1e-10 * lp.norm().max(1.0) {
                return Err(SynthesisError::CertificateViolated {
                    inequality: format!(
                        "{name} gains: Λ Π⁻¹ must be symmetric (use commuting Λ and Π)"
                    ),
                });
            }
        }

        let beta_link = stage_rate("link", &self.link)?;
        let beta_motor = stage_rate("motor", &self.motor)?;

        let q0 = DVector::zeros(nl + nm);
        let mut kd_full = DMatrix::zeros(nl + nm, nl + nm);
        kd_full.view_mut((0, 0), (nl, nl)).copy_from(&self.link.kd);
        kd_full
            .view_mut((nl, nl), (nm, nm))
            .copy_from(&self.motor.kd);
        let d_plus_kd = model.damping(&q0) + kd_full;
        let m_inv = model
            .inertia(&q0)
            .cholesky()
            .ok_or(SynthesisError::NotPositiveDefinite { name: "inertia" })?
            .inverse();
        let lambda_min = |m: &DMatrix<f64>| {
            m.clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        };
        let momentum_rate = lambda_min(&d_plus_kd) * lambda_min(&m_inv);
        let beta = beta_link.min(beta_motor).min(momentum_rate);

        let block_rate = |m_blk: DMatrix<f64>, d_blk: DMatrix<f64>| -> f64 {
            // Largest b with (D + K_d) ⪰ b M: generalized eigenvalue through
            // the Cholesky factor of M.
            let l = m_blk.cholesky().unwrap().l();
            let x = l.solve_lower_triangular(&d_blk).unwrap();
            let y = l.solve_lower_triangular(&x.transpose()).unwrap();
            lambda_min(&((&y + y.transpose()) * 0.5))
        };
        let d_full = model.damping(&q0);
        let m_full = model.inertia(&q0);
        let blockwise_momentum_rates = vec![
            block_rate(
                m_full.view((0, 0), (nl, nl)).into_owned(),
                d_full.view((0, 0), (nl, nl)).into_owned() + &self.link.kd,
            ),
            block_rate(
                m_full.view((nl, nl), (nm, nm)).into_owned(),
                d_full.view((nl, nl), (nm, nm)).into_owned() + &self.motor.kd,
            ),
        ];

        Ok(RateCertificate {
            beta_link,
            beta_motor,
            momentum_rate,
            beta,
            blockwise_momentum_rates,
        })
    }
}

/// Largest `β` with `Π Λ + Λᵀ Π ⪰ 2 β Π`, with a residual check that the
/// inequality actually holds at the derived value.
fn stage_rate(name: &'static str, gains: &SubsystemGains) -> Result<f64, SynthesisError> {
    let w = &gains.metric * &gains.lambda + gains.lambda.transpose() * &gains.metric;
    let l = gains
        .metric
        .clone()
        .cholesky()
        .ok_or(SynthesisError::NotPositiveDefinite { name: "metric" })?
        .l();
    let x = l.solve_lower_triangular(&w).unwrap();
    let y = l.solve_lower_triangular(&x.transpose()).unwrap();
    let sym = (&y + y.transpose()) * 0.5;
    let beta = 0.5
        * sym
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
    if beta <= 0.0 {
        return Err(SynthesisError::CertificateViolated {
            inequality: format!("{name} gains: Π Λ + Λᵀ Π ⪰ 2 β Π requires β > 0"),
        });
    }
    // Negative-semidefiniteness of −(Π Λ + Λᵀ Π) + 2 β Π at the derived β.
    let residual = -&w + &gains.metric * (2.0 * beta);
    let max_eig = residual
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if max_eig > 1e-10 * w.norm().max(1.0) {
        return Err(SynthesisError::CertificateViolated {
            inequality: format!("{name} gains: −(Π Λ + Λᵀ Π) + 2 β Π is not negative semidefinite"),
        });
    }
    Ok(beta)
}

/// Derived exponential rates of the closed loop.
#[derive(Debug, Clone)]
pub struct RateCertificate {
    /// Largest `β` with `Π_l Λ_l + Λ_lᵀ Π_l ⪰ 2 β Π_l`.
    pub beta_link: f64,
    /// Same for the motor stage.
    pub beta_motor: f64,
    /// `λ_min(D + K_d) · λ_min(M⁻¹)`: the momentum-channel rate, with the
    /// minima taken over the full matrices rather than per subsystem.
    pub momentum_rate: f64,
    /// Overall guaranteed rate: `min(min(β_l, β_m), momentum_rate)`.
    pub beta: f64,
    /// Per-subsystem generalized rates `λ_min((D_i + K_di) M_i⁻¹)`,
    /// reported for diagnostics; taking the minimum blockwise instead of
    /// over the full matrices would give a larger (less conservative)
    /// momentum-channel rate.
    pub blockwise_momentum_rates: Vec<f64>,
}

/// Convenience wrapper around [`ControllerConfig::validate`].
pub fn derive_beta(
    cfg: &ControllerConfig,
    model: &FjrModel,
) -> Result<RateCertificate, SynthesisError> {
    cfg.validate(model)
}

// ---------------------------------------------------------------------------
// Forward-Jacobian scalar chain
// ---------------------------------------------------------------------------

/// A vector quantity carrying its Jacobian with respect to the virtual state
/// `x_v = (q_l, q_m, p_l, p_m)`. A Jacobian with zero columns means
/// "not tracked"; every operation propagates emptiness for free.
#[derive(Clone)]
struct Jet {
    v: DVector<f64>,
    j: DMatrix<f64>,
}

impl Jet {
    fn constant(v: DVector<f64>, cols: usize) -> Self {
        let r = v.len();
        Self {
            v,
            j: DMatrix::zeros(r, cols),
        }
    }

    fn select(x: &DVector<f64>, offset: usize, len: usize, cols: usize) -> Self {
        let v = x.rows(offset, len).into_owned();
        let mut j = DMatrix::zeros(len, cols);
        if cols > 0 {
            for i in 0..len {
                j[(i, offset + i)] = 1.0;
            }
        }
        Self { v, j }
    }

    fn add(&self, o: &Jet) -> Jet {
        Jet {
            v: &self.v + &o.v,
            j: &self.j + &o.j,
        }
    }

    fn sub(&self, o: &Jet) -> Jet {
        Jet {
            v: &self.v - &o.v,
            j: &self.j - &o.j,
        }
    }

    fn lmul(a: &DMatrix<f64>, x: &Jet) -> Jet {
        Jet {
            v: a * &x.v,
            j: a * &x.j,
        }
    }

    fn neg(&self) -> Jet {
        Jet {
            v: -&self.v,
            j: -&self.j,
        }
    }
}

/// Gradient of the link potential at a tracked configuration.
fn potential_gradient_jet(link: &dyn MechanicalModel, q: &Jet) -> Jet {
    Jet {
        v: link.potential_gradient(&q.v),
        j: link.potential_hessian(&q.v) * &q.j,
    }
}

/// `∂²P(q)·w` for tracked `q` and `w`.
fn hessian_product_jet(link: &dyn MechanicalModel, q: &Jet, w: &Jet) -> Jet {
    let h = link.potential_hessian(&q.v);
    let t3 = link.potential_third_directional(&q.v, &w.v);
    Jet {
        v: &h * &w.v,
        j: t3 * &q.j + h * &w.j,
    }
}

/// `T³P(q)[a]·a` (the quadratic third-derivative term) for tracked `q`, `a`.
fn third_quadratic_jet(link: &dyn MechanicalModel, q: &Jet, a: &Jet) -> Jet {
    let t3 = link.potential_third_directional(&q.v, &a.v);
    let t4 = link.potential_fourth_bidirectional(&q.v, &a.v, &a.v);
    Jet {
        v: &t3 * &a.v,
        j: t4 * &q.j + (t3 * &a.j) * 2.0,
    }
}

// ---------------------------------------------------------------------------
// Controller outputs
// ---------------------------------------------------------------------------

/// Output of the link stage.
#[derive(Debug, Clone)]
pub struct LinkControl {
    pub u: DVector<f64>,
    pub u_ff: DVector<f64>,
    pub u_fb: DVector<f64>,
    /// Position error `q̃_l`.
    pub pos_err: DVector<f64>,
    /// Auxiliary momentum reference `p_lr`.
    pub mom_ref: DVector<f64>,
    /// Momentum error `σ_l = p_l − p_lr`.
    pub mom_err: DVector<f64>,
}

/// Motor position reference and its first two time derivatives.
#[derive(Debug, Clone)]
pub struct MotorReference {
    pub pos: DVector<f64>,
    pub vel: DVector<f64>,
    pub acc: DVector<f64>,
}

/// Full decomposition of one motor-controller evaluation. The applied input
/// is `u = u_ff + u_fb`, exactly.
#[derive(Debug, Clone)]
pub struct ControlDecomposition {
    pub u: DVector<f64>,
    pub u_ff: DVector<f64>,
    pub u_fb: DVector<f64>,
    /// Link-stage command that the joint is asked to transmit.
    pub link_control: DVector<f64>,
    pub pos_err_link: DVector<f64>,
    pub pos_err_motor: DVector<f64>,
    pub mom_ref_link: DVector<f64>,
    pub mom_err_link: DVector<f64>,
    pub mom_ref_motor: DVector<f64>,
    pub mom_err_motor: DVector<f64>,
    pub motor_reference: MotorReference,
}

impl ControlDecomposition {
    /// Error coordinates stacked as `(q̃_l, q̃_m, σ_l, σ_m)`.
    pub fn error_coordinates(&self) -> DVector<f64> {
        let nl = self.pos_err_link.len();
        let nm = self.pos_err_motor.len();
        let mut out = DVector::zeros(2 * (nl + nm));
        out.rows_mut(0, nl).copy_from(&self.pos_err_link);
        out.rows_mut(nl, nm).copy_from(&self.pos_err_motor);
        out.rows_mut(nl + nm, nl).copy_from(&self.mom_err_link);
        out.rows_mut(2 * nl + nm, nm).copy_from(&self.mom_err_motor);
        out
    }
}

/// Jacobians of the controller evaluation with respect to `x_v`.
pub struct ControlSensitivities {
    /// `∂u/∂x_v`, size `n_m × 2n`.
    pub du_dxv: DMatrix<f64>,
    /// Rows of `∂(q̃_l, q̃_m, σ_l, σ_m)/∂x_v`, size `2n × 2n`: the implicit
    /// differential transformation into error coordinates.
    pub error_map: DMatrix<f64>,
}

// ---------------------------------------------------------------------------
// Synthesized controller
// ---------------------------------------------------------------------------

/// A validated controller bound to a model and a reference trajectory.
/// Evaluation is a pure function of `(t, x_v, x, ω)`.
pub struct FjrController<'a> {
    model: &'a FjrModel,
    cfg: &'a ControllerConfig,
    traj: &'a dyn ReferenceTrajectory,
    certificate: RateCertificate,
    error_dynamics: ErrorDynamics,
    m_l: DMatrix<f64>,
    m_m: DMatrix<f64>,
    m_l_inv: DMatrix<f64>,
    m_m_inv: DMatrix<f64>,
    k: DMatrix<f64>,
    k_inv: DMatrix<f64>,
    b_m_inv: DMatrix<f64>,
    /// `Π_m⁻¹ Kᵀ M_l⁻¹`: maps the link momentum error into the motor
    /// velocity correction.
    coupling: DMatrix<f64>,
}

impl<'a> FjrController<'a> {
    pub fn new(
        model: &'a FjrModel,
        cfg: &'a ControllerConfig,
        traj: &'a dyn ReferenceTrajectory,
    ) -> Result<Self, SynthesisError> {
        if traj.dim() != model.n_link() {
            return Err(SynthesisError::DimensionMismatch {
                what: "reference trajectory",
                expected: model.n_link(),
                got: traj.dim(),
            });
        }
        if !model.constant_inertia() {
            return Err(SynthesisError::VaryingInertia);
        }
        let certificate = cfg.validate(model)?;
        let error_dynamics = ErrorDynamics::new(model, cfg)?;
        let q0 = DVector::zeros(model.dof());
        let nl = model.n_link();
        let m_full = model.inertia(&q0);
        let m_l = m_full.view((0, 0), (nl, nl)).into_owned();
        let m_m = m_full
            .view((nl, nl), (model.n_motor(), model.n_motor()))
            .into_owned();
        let m_l_inv = m_l.clone().cholesky().unwrap().inverse();
        let m_m_inv = m_m.clone().cholesky().unwrap().inverse();
        let k = model.stiffness().clone();
        let k_inv = k.clone().cholesky().unwrap().inverse();
        let b_m_inv = model
            .motor_input()
            .clone()
            .lu()
            .try_inverse()
            .expect("motor input matrix is full rank by construction");
        let pi_m_inv = cfg.motor.metric.clone().cholesky().unwrap().inverse();
        let coupling = &pi_m_inv * k.transpose() * &m_l_inv;
        Ok(Self {
            model,
            cfg,
            traj,
            certificate,
            error_dynamics,
            m_l,
            m_m,
            m_l_inv,
            m_m_inv,
            k,
            k_inv,
            b_m_inv,
            coupling,
        })
    }

    pub fn model(&self) -> &FjrModel {
        self.model
    }

    pub fn config(&self) -> &ControllerConfig {
        self.cfg
    }

    pub fn trajectory(&self) -> &dyn ReferenceTrajectory {
        self.traj
    }

    pub fn certificate(&self) -> &RateCertificate {
        &self.certificate
    }

    pub fn error_dynamics(&self) -> &ErrorDynamics {
        &self.error_dynamics
    }

    /// Controller evaluation `u = η(x_v, x, t) + ω` on the virtual state.
    /// The plant input of the closed loop is `self.control(t, x, x, ω)`.
    pub fn control(
        &self,
        t: f64,
        x_v: &PhaseState,
        x: &PhaseState,
        omega: &DVector<f64>,
    ) -> ControlDecomposition {
        self.evaluate(t, x_v, x, omega, false).0
    }

    /// Controller evaluation together with its Jacobians in `x_v`.
    pub fn control_with_sensitivities(
        &self,
        t: f64,
        x_v: &PhaseState,
        x: &PhaseState,
        omega: &DVector<f64>,
    ) -> Result<(ControlDecomposition, ControlSensitivities), SynthesisError> {
        if !matches!(self.cfg.derivative_mode, DerivativeMode::Analytic) {
            return Err(SynthesisError::AnalyticModeRequired);
        }
        let (dec, sens) = self.evaluate(t, x_v, x, omega, true);
        Ok((dec, sens.expect("sensitivities requested")))
    }

    /// Motor reference `(q_md, q̇_md, q̈_md)` for the plant state `x`
    /// (the virtual state evaluated at the actual one).
    pub fn motor_reference(&self, t: f64, x: &PhaseState) -> MotorReference {
        self.control(t, x, x, &DVector::zeros(self.model.n_motor()))
            .motor_reference
    }

    /// Link-stage control for a virtual link state; thin wrapper over the
    /// standalone [`link_controller`] with this controller's gains.
    pub fn link_control(
        &self,
        t: f64,
        x_lv: &PhaseState,
        x_l: &PhaseState,
        omega_l: &DVector<f64>,
    ) -> Result<LinkControl, SynthesisError> {
        link_controller(
            self.model.link(),
            &self.cfg.link,
            self.traj,
            t,
            x_lv,
            x_l,
            omega_l,
        )
    }

    /// The state lying exactly on the reference at time `t`: link on the
    /// desired trajectory, motor on the induced motor reference.
    pub fn reference_state(&self, t: f64) -> PhaseState {
        let tp = self.traj.sample(t);
        let nl = self.model.n_link();
        let nm = self.model.n_motor();
        let p_l = &self.m_l * &tp.vel;
        // Bootstrap: q_md does not depend on the motor coordinates, so any
        // placeholder works for the first pass.
        let mut q = DVector::zeros(nl + nm);
        q.rows_mut(0, nl).copy_from(&tp.pos);
        q.rows_mut(nl, nm).copy_from(&tp.pos);
        let mut p = DVector::zeros(nl + nm);
        p.rows_mut(0, nl).copy_from(&p_l);
        let draft = PhaseState { q, p };
        let omega = DVector::zeros(nm);
        let first = self.control(t, &draft, &draft, &omega);
        let mut q2 = draft.q.clone();
        q2.rows_mut(nl, nm).copy_from(&first.motor_reference.pos);
        let refined = PhaseState {
            q: q2,
            p: draft.p.clone(),
        };
        let second = self.control(t, &refined, &refined, &omega);
        let mut p2 = refined.p.clone();
        p2.rows_mut(nl, nm).copy_from(&second.mom_ref_motor);
        PhaseState { q: refined.q, p: p2 }
    }

    fn evaluate(
        &self,
        t: f64,
        x_v: &PhaseState,
        x: &PhaseState,
        omega: &DVector<f64>,
        with_jacobian: bool,
    ) -> (ControlDecomposition, Option<ControlSensitivities>) {
        let nl = self.model.n_link();
        let nm = self.model.n_motor();
        let n = nl + nm;
        let cols = if with_jacobian { 2 * n } else { 0 };
        let link = self.model.link();
        let tp = self.traj.sample(t);
        let xv = x_v.to_vector();

        // Damping is anchored at the actual configuration; the bundled
        // models keep it constant, which the derivative steps assume.
        let d_l = link.damping(&x.q.rows(0, nl).into_owned());
        let d_m = self
            .model
            .motor()
            .damping(&x.q.rows(nl, nm).into_owned());

        let q_lv = Jet::select(&xv, 0, nl, cols);
        let q_mv = Jet::select(&xv, nl, nm, cols);
        let p_lv = Jet::select(&xv, n, nl, cols);
        let p_mv = Jet::select(&xv, n + nl, nm, cols);

        let qd0 = Jet::constant(tp.pos.clone(), cols);
        let qd1 = Jet::constant(tp.vel.clone(), cols);
        let qd2 = Jet::constant(tp.acc.clone(), cols);
        let qd3 = Jet::constant(tp.jerk.clone(), cols);
        let qd4 = Jet::constant(tp.snap.clone(), cols);

        // Link stage.
        let e_q = q_lv.sub(&qd0);
        let v_ref = qd1.sub(&Jet::lmul(&self.cfg.link.lambda, &e_q));
        let p_ref = Jet::lmul(&self.m_l, &v_ref);
        let e_p = p_lv.sub(&p_ref);
        let vel_l = Jet::lmul(&self.m_l_inv, &p_lv);
        let e_q_dot = vel_l.sub(&qd1);
        let p_ref_dot = Jet::lmul(
            &self.m_l,
            &qd2.sub(&Jet::lmul(&self.cfg.link.lambda, &e_q_dot)),
        );
        let grad_p = potential_gradient_jet(link, &q_lv);
        let u_l_ff = p_ref_dot
            .add(&grad_p)
            .add(&Jet::lmul(&d_l, &Jet::lmul(&self.m_l_inv, &p_ref)));
        let u_l_fb = Jet::lmul(&self.cfg.link.metric, &e_q)
            .neg()
            .sub(&Jet::lmul(&self.cfg.link.kd, &Jet::lmul(&self.m_l_inv, &e_p)));
        let u_l = u_l_ff.add(&u_l_fb);

        // Motor reference and its derivatives.
        let q_md = q_lv.add(&Jet::lmul(&self.k_inv, &u_l));
        let e_qm = q_mv.sub(&q_md);
        let deflection = q_mv.sub(&q_lv);
        // Link momentum rate along the virtual flow (the link rows carry no
        // input).
        let p_lv_dot = grad_p
            .neg()
            .add(&Jet::lmul(&self.k, &deflection))
            .sub(&Jet::lmul(&d_l, &vel_l));
        let e_p_dot = p_lv_dot.sub(&p_ref_dot);
        let e_q_ddot = Jet::lmul(&self.m_l_inv, &p_lv_dot).sub(&qd2);
        let p_ref_ddot = Jet::lmul(
            &self.m_l,
            &qd3.sub(&Jet::lmul(&self.cfg.link.lambda, &e_q_ddot)),
        );
        let hess_vel = hessian_product_jet(link, &q_lv, &vel_l);
        let u_l_dot = p_ref_ddot
            .add(&hess_vel)
            .add(&Jet::lmul(&d_l, &Jet::lmul(&self.m_l_inv, &p_ref_dot)))
            .sub(&Jet::lmul(&self.cfg.link.metric, &e_q_dot))
            .sub(&Jet::lmul(
                &self.cfg.link.kd,
                &Jet::lmul(&self.m_l_inv, &e_p_dot),
            ));

        let vel_m = Jet::lmul(&self.m_m_inv, &p_mv);

        let (q_md_dot, q_md_ddot, sigma_l_dot) = match self.cfg.derivative_mode {
            DerivativeMode::Analytic => {
                let q_md_dot = vel_l.add(&Jet::lmul(&self.k_inv, &u_l_dot));
                // Second derivatives through the link equation of motion.
                let vel_l_dot = Jet::lmul(&self.m_l_inv, &p_lv_dot);
                let hess_acc = third_quadratic_jet(link, &q_lv, &vel_l)
                    .add(&hessian_product_jet(link, &q_lv, &vel_l_dot));
                let p_lv_ddot = hess_vel
                    .neg()
                    .add(&Jet::lmul(&self.k, &vel_m.sub(&vel_l)))
                    .sub(&Jet::lmul(&d_l, &vel_l_dot));
                let e_p_ddot = p_lv_ddot.sub(&p_ref_ddot);
                let e_q_dddot = Jet::lmul(&self.m_l_inv, &p_lv_ddot).sub(&qd3);
                let p_ref_dddot = Jet::lmul(
                    &self.m_l,
                    &qd4.sub(&Jet::lmul(&self.cfg.link.lambda, &e_q_dddot)),
                );
                let u_l_ddot = p_ref_dddot
                    .add(&hess_acc)
                    .add(&Jet::lmul(&d_l, &Jet::lmul(&self.m_l_inv, &p_ref_ddot)))
                    .sub(&Jet::lmul(&self.cfg.link.metric, &e_q_ddot))
                    .sub(&Jet::lmul(
                        &self.cfg.link.kd,
                        &Jet::lmul(&self.m_l_inv, &e_p_ddot),
                    ));
                let q_md_ddot = vel_l_dot.add(&Jet::lmul(&self.k_inv, &u_l_ddot));
                (q_md_dot, q_md_ddot, e_p_dot)
            }
            DerivativeMode::FiniteDifference { step } => {
                let (vel, acc, sld) = self.fd_reference_derivatives(t, x_v, step);
                (
                    Jet::constant(vel, cols),
                    Jet::constant(acc, cols),
                    Jet::constant(sld, cols),
                )
            }
        };

        let e_qm_dot = vel_m.sub(&q_md_dot);
        let p_mr = Jet::lmul(
            &self.m_m,
            &q_md_dot
                .sub(&Jet::lmul(&self.cfg.motor.lambda, &e_qm))
                .sub(&Jet::lmul(&self.coupling, &e_p)),
        );
        let e_pm = p_mv.sub(&p_mr);
        let p_mr_dot = Jet::lmul(
            &self.m_m,
            &q_md_ddot
                .sub(&Jet::lmul(&self.cfg.motor.lambda, &e_qm_dot))
                .sub(&Jet::lmul(&self.coupling, &sigma_l_dot)),
        );

        // Force-level commands, mapped through the motor input matrix.
        let force_ff = p_mr_dot
            .add(&Jet::lmul(&self.k, &deflection))
            .add(&Jet::lmul(&d_m, &Jet::lmul(&self.m_m_inv, &p_mr)));
        let force_fb = Jet::lmul(&self.cfg.motor.metric, &e_qm)
            .neg()
            .sub(&Jet::lmul(
                &self.cfg.motor.kd,
                &Jet::lmul(&self.m_m_inv, &e_pm),
            ));
        let u_ff = Jet::lmul(&self.b_m_inv, &force_ff);
        let u_fb = Jet::lmul(&self.b_m_inv, &force_fb).add(&Jet::constant(omega.clone(), cols));
        let u = u_ff.add(&u_fb);

        let decomposition = ControlDecomposition {
            u: u.v.clone(),
            u_ff: u_ff.v,
            u_fb: u_fb.v,
            link_control: u_l.v,
            pos_err_link: e_q.v.clone(),
            pos_err_motor: e_qm.v.clone(),
            mom_ref_link: p_ref.v,
            mom_err_link: e_p.v.clone(),
            mom_ref_motor: p_mr.v,
            mom_err_motor: e_pm.v.clone(),
            motor_reference: MotorReference {
                pos: q_md.v,
                vel: q_md_dot.v,
                acc: q_md_ddot.v,
            },
        };
        let sens = if with_jacobian {
            let mut error_map = DMatrix::zeros(2 * n, 2 * n);
            error_map.view_mut((0, 0), (nl, 2 * n)).copy_from(&e_q.j);
            error_map.view_mut((nl, 0), (nm, 2 * n)).copy_from(&e_qm.j);
            error_map.view_mut((n, 0), (nl, 2 * n)).copy_from(&e_p.j);
            error_map
                .view_mut((n + nl, 0), (nm, 2 * n))
                .copy_from(&e_pm.j);
            Some(ControlSensitivities {
                du_dxv: u.j,
                error_map,
            })
        } else {
            None
        };
        (decomposition, sens)
    }

    /// Finite-difference fallback: the motor reference velocity and
    /// acceleration, and the link momentum-error rate, by central
    /// differences of the reference chain over one-step state predictions.
    /// The prediction integrates the virtual flow with zero input; the
    /// missing motor torque only enters the differenced quantities at higher
    /// order than the stencil resolves.
    fn fd_reference_derivatives(
        &self,
        t: f64,
        x_v: &PhaseState,
        h: f64,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let predict = |dt: f64| -> PhaseState {
            let f = |s: &PhaseState| -> DVector<f64> {
                let u0 = DVector::zeros(self.model.n_motor());
                crate::phmech::ph_vector_field(self.model, s, &u0)
                    .expect("prediction step")
                    .to_vector()
            };
            // One classical fourth-order step of size dt.
            let y0 = x_v.to_vector();
            let k1 = f(x_v);
            let k2 = f(&PhaseState::from_vector(&(&y0 + &k1 * (dt / 2.0))));
            let k3 = f(&PhaseState::from_vector(&(&y0 + &k2 * (dt / 2.0))));
            let k4 = f(&PhaseState::from_vector(&(&y0 + &k3 * dt)));
            PhaseState::from_vector(&(y0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)))
        };
        let plus = predict(h);
        let minus = predict(-h);
        let (qmd_p, sig_p) = self.link_chain_snapshot(t + h, &plus);
        let (qmd_m, sig_m) = self.link_chain_snapshot(t - h, &minus);
        let (qmd_0, _) = self.link_chain_snapshot(t, x_v);
        let vel = (&qmd_p - &qmd_m) / (2.0 * h);
        let acc = (qmd_p + qmd_m - qmd_0 * 2.0) / (h * h);
        let sld = (sig_p - sig_m) / (2.0 * h);
        (vel, acc, sld)
    }

    /// `(q_md, σ_l)` at a given time and state, without derivatives.
    fn link_chain_snapshot(&self, t: f64, x_v: &PhaseState) -> (DVector<f64>, DVector<f64>) {
        let nl = self.model.n_link();
        let tp = self.traj.sample(t);
        let q_lv = x_v.q.rows(0, nl).into_owned();
        let p_lv = x_v.p.rows(0, nl).into_owned();
        let e_q = &q_lv - &tp.pos;
        let p_ref = &self.m_l * (&tp.vel - &self.cfg.link.lambda * &e_q);
        let e_p = &p_lv - &p_ref;
        let vel_l = &self.m_l_inv * &p_lv;
        let e_q_dot = &vel_l - &tp.vel;
        let p_ref_dot = &self.m_l * (&tp.acc - &self.cfg.link.lambda * &e_q_dot);
        let d_l = self.model.link().damping(&q_lv);
        let u_l = &p_ref_dot
            + self.model.link().potential_gradient(&q_lv)
            + &d_l * (&self.m_l_inv * &p_ref)
            - &self.cfg.link.metric * &e_q
            - &self.cfg.link.kd * (&self.m_l_inv * &e_p);
        let q_md = &q_lv + &self.k_inv * u_l;
        (q_md, e_p)
    }
}

/// Standalone link-stage law for a fully-actuated mechanical system, with
/// the inertia-rate and gyroscopic terms evaluated at the actual state so it
/// remains valid for configuration-dependent inertia.
pub fn link_controller(
    model: &dyn MechanicalModel,
    gains: &SubsystemGains,
    traj: &dyn ReferenceTrajectory,
    t: f64,
    x_v: &PhaseState,
    x: &PhaseState,
    omega: &DVector<f64>,
) -> Result<LinkControl, SynthesisError> {
    let n = model.dof();
    if x_v.dof() != n || x.dof() != n || traj.dim() != n {
        return Err(SynthesisError::DimensionMismatch {
            what: "link controller state",
            expected: n,
            got: x_v.dof(),
        });
    }
    let tp = traj.sample(t);
    let m = model.inertia(&x.q);
    let m_inv = m
        .clone()
        .cholesky()
        .ok_or(SynthesisError::NotPositiveDefinite { name: "inertia" })?
        .inverse();
    let qdot_actual = &m_inv * &x.p;
    let d = model.damping(&x.q);

    let e_q = &x_v.q - &tp.pos;
    let v_ref = &tp.vel - &gains.lambda * &e_q;
    let p_ref = &m * &v_ref;
    let e_p = &x_v.p - &p_ref;
    let e_q_dot = &m_inv * &x_v.p - &tp.vel;
    let mdot = model.inertia_directional_derivative(&x.q, &qdot_actual);
    let p_ref_dot = &mdot * &v_ref + &m * (&tp.acc - &gains.lambda * &e_q_dot);
    let s = crate::phmech::gyroscopic_factor(model, &x.q, &qdot_actual);
    let e_mat = s - &mdot * 0.5;
    let u_ff = &p_ref_dot + model.potential_gradient(&x_v.q) + (&e_mat + &d) * (&m_inv * &p_ref);
    let u_fb = -(&gains.metric * &e_q) - &gains.kd * (&m_inv * &e_p) + omega;
    Ok(LinkControl {
        u: &u_ff + &u_fb,
        u_ff,
        u_fb,
        pos_err: e_q,
        mom_ref: p_ref,
        mom_err: e_p,
    })
}

/// Motor reference for the plant state `x`: the controller chain evaluated
/// at `x_v = x`.
pub fn motor_reference(
    model: &FjrModel,
    cfg: &ControllerConfig,
    traj: &dyn ReferenceTrajectory,
    t: f64,
    x: &PhaseState,
) -> Result<MotorReference, SynthesisError> {
    let ctrl = FjrController::new(model, cfg, traj)?;
    Ok(ctrl.motor_reference(t, x))
}

/// One-shot motor-controller evaluation; for repeated calls build an
/// [`FjrController`] once and use [`FjrController::control`].
pub fn motor_controller(
    model: &FjrModel,
    cfg: &ControllerConfig,
    traj: &dyn ReferenceTrajectory,
    t: f64,
    x_v: &PhaseState,
    x: &PhaseState,
    omega: &DVector<f64>,
) -> Result<ControlDecomposition, SynthesisError> {
    let ctrl = FjrController::new(model, cfg, traj)?;
    Ok(ctrl.control(t, x_v, x, omega))
}

// ---------------------------------------------------------------------------
// Closed-loop variational structure
// ---------------------------------------------------------------------------

/// The closed-loop variational dynamics in error coordinates
/// `δx̃ = (δq̃_l, δq̃_m, δσ_l, δσ_m)`:
///
/// ```text
/// δx̃̇ = [J − R] · diag(Π, M⁻¹) · δx̃ + Ψ δω
/// ```
///
/// with exactly skew `J`, symmetric `R`, and the storage metric
/// `G = diag(Π_l, Π_m, M_l⁻¹, M_m⁻¹)`. For configuration-independent
/// inertia these matrices are constant and the error dynamics are exactly
/// linear, so the same generator also drives the finite error coordinates of
/// the closed loop.
pub struct ErrorDynamics {
    n_link: usize,
    n_motor: usize,
    interconnection: DMatrix<f64>,
    damping_factor: DMatrix<f64>,
    metric: DMatrix<f64>,
    generator: DMatrix<f64>,
    input_map: DMatrix<f64>,
    pi_l: DMatrix<f64>,
    pi_m: DMatrix<f64>,
    m_l_inv: DMatrix<f64>,
    m_m_inv: DMatrix<f64>,
    b_m: DMatrix<f64>,
}

impl ErrorDynamics {
    pub fn new(model: &FjrModel, cfg: &ControllerConfig) -> Result<Self, SynthesisError> {
        if !model.constant_inertia() {
            return Err(SynthesisError::VaryingInertia);
        }
        let nl = model.n_link();
        let nm = model.n_motor();
        let n = nl + nm;
        let q0 = DVector::zeros(n);
        let m = model.inertia(&q0);
        let d = model.damping(&q0);
        let m_l_inv = m
            .view((0, 0), (nl, nl))
            .into_owned()
            .cholesky()
            .ok_or(SynthesisError::NotPositiveDefinite { name: "link inertia" })?
            .inverse();
        let m_m_inv = m
            .view((nl, nl), (nm, nm))
            .into_owned()
            .cholesky()
            .ok_or(SynthesisError::NotPositiveDefinite {
                name: "motor inertia",
            })?
            .inverse();
        let pi_l = cfg.link.metric.clone();
        let pi_m = cfg.motor.metric.clone();
        let pi_l_inv = pi_l
            .clone()
            .cholesky()
            .ok_or(SynthesisError::NotPositiveDefinite { name: "link metric" })?
            .inverse();
        let pi_m_inv = pi_m
            .clone()
            .cholesky()
            .ok_or(SynthesisError::NotPositiveDefinite {
                name: "motor metric",
            })?
            .inverse();
        let k = model.stiffness();

        // Skew interconnection; the coupling block and its negative
        // transpose are built from one shared product so skewness is exact.
        let coupling = &pi_m_inv * k.transpose();
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        j.view_mut((0, n), (nl, nl))
            .copy_from(&DMatrix::identity(nl, nl));
        j.view_mut((n, 0), (nl, nl))
            .copy_from(&(-DMatrix::identity(nl, nl)));
        j.view_mut((nl, n + nl), (nm, nm))
            .copy_from(&DMatrix::identity(nm, nm));
        j.view_mut((n + nl, nl), (nm, nm))
            .copy_from(&(-DMatrix::identity(nm, nm)));
        j.view_mut((nl, n), (nm, nl)).copy_from(&(-&coupling));
        j.view_mut((n, nl), (nl, nm)).copy_from(&coupling.transpose());

        // Symmetric damping factor.
        let mut r = DMatrix::zeros(2 * n, 2 * n);
        r.view_mut((0, 0), (nl, nl))
            .copy_from(&(&cfg.link.lambda * &pi_l_inv));
        r.view_mut((nl, nl), (nm, nm))
            .copy_from(&(&cfg.motor.lambda * &pi_m_inv));
        r.view_mut((n, n), (nl, nl))
            .copy_from(&(d.view((0, 0), (nl, nl)).into_owned() + &cfg.link.kd));
        r.view_mut((n + nl, n + nl), (nm, nm))
            .copy_from(&(d.view((nl, nl), (nm, nm)).into_owned() + &cfg.motor.kd));

        let mut metric = DMatrix::zeros(2 * n, 2 * n);
        metric.view_mut((0, 0), (nl, nl)).copy_from(&pi_l);
        metric.view_mut((nl, nl), (nm, nm)).copy_from(&pi_m);
        metric.view_mut((n, n), (nl, nl)).copy_from(&m_l_inv);
        metric.view_mut((n + nl, n + nl), (nm, nm)).copy_from(&m_m_inv);

        let generator = (&j - &r) * &metric;

        let mut input_map = DMatrix::zeros(2 * n, nm);
        input_map
            .view_mut((n + nl, 0), (nm, nm))
            .copy_from(model.motor_input());

        Ok(Self {
            n_link: nl,
            n_motor: nm,
            interconnection: j,
            damping_factor: r,
            metric,
            generator,
            input_map,
            pi_l,
            pi_m,
            m_l_inv,
            m_m_inv,
            b_m: model.motor_input().clone(),
        })
    }

    pub fn interconnection(&self) -> &DMatrix<f64> {
        &self.interconnection
    }

    pub fn damping_factor(&self) -> &DMatrix<f64> {
        &self.damping_factor
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    /// `[J − R] · G`: drives both `δx̃` and (exactly, for constant inertia)
    /// the finite error coordinates.
    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    /// Column map of the auxiliary input `δω` (motor momentum rows).
    pub fn input_map(&self) -> &DMatrix<f64> {
        &self.input_map
    }

    fn split(&self, dx: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let (nl, nm) = (self.n_link, self.n_motor);
        let n = nl + nm;
        (
            dx.rows(0, nl).into_owned(),
            dx.rows(nl, nm).into_owned(),
            dx.rows(n, nl).into_owned(),
            dx.rows(n + nl, nm).into_owned(),
        )
    }

    /// Storage split into link and motor parts; the total is their sum.
    pub fn storage_parts(&self, dx_err: &DVector<f64>) -> (f64, f64) {
        let (dq_l, dq_m, ds_l, ds_m) = self.split(dx_err);
        let v_l = 0.5 * dq_l.dot(&(&self.pi_l * &dq_l)) + 0.5 * ds_l.dot(&(&self.m_l_inv * &ds_l));
        let v_m = 0.5 * dq_m.dot(&(&self.pi_m * &dq_m)) + 0.5 * ds_m.dot(&(&self.m_m_inv * &ds_m));
        (v_l, v_m)
    }

    /// Storage value `V = ½ δx̃ᵀ G δx̃`, summed blockwise.
    pub fn storage(&self, dx_err: &DVector<f64>) -> f64 {
        let (v_l, v_m) = self.storage_parts(dx_err);
        v_l + v_m
    }

    /// Analytic storage rate `dV/dt = δx̃ᵀ G (A δx̃ + Ψ δω)` along the
    /// closed-loop variational flow.
    pub fn storage_rate(&self, dx_err: &DVector<f64>, domega: &DVector<f64>) -> f64 {
        let flow = &self.generator * dx_err + &self.input_map * domega;
        dx_err.dot(&(&self.metric * flow))
    }

    /// Variational output paired with `δω`: `δy = B_mᵀ M_m⁻¹ δσ_m`.
    pub fn variational_output(&self, dx_err: &DVector<f64>) -> DVector<f64> {
        let (_, _, _, ds_m) = self.split(dx_err);
        self.b_m.transpose() * (&self.m_m_inv * ds_m)
    }
}
