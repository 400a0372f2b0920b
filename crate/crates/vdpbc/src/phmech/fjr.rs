//! Flexible-joint robot model: a link-side and a motor-side mechanical
//! system coupled by elastic joints.
//!
//! The configuration splits into link positions `q_l` and motor positions
//! `q_m`; the joint deflection is `z = q_m − q_l` and the coupling potential
//! is `½ zᵀ K z` with a symmetric positive-definite stiffness `K`. Torques
//! act on the motor coordinates only, so the system is underactuated.

use nalgebra::{DMatrix, DVector};

use super::{MechanicalModel, PhaseState};

/// Link/motor partition of a phase state.
#[derive(Debug, Clone)]
pub struct FjrParts {
    pub q_link: DVector<f64>,
    pub q_motor: DVector<f64>,
    pub p_link: DVector<f64>,
    pub p_motor: DVector<f64>,
}

impl FjrParts {
    /// Joint deflection `q_motor − q_link`.
    pub fn deflection(&self) -> DVector<f64> {
        &self.q_motor - &self.q_link
    }
}

/// Flexible-joint robot assembled from a link model, a motor model, a joint
/// stiffness matrix and the motor input map.
pub struct FjrModel {
    link: Box<dyn MechanicalModel>,
    motor: Box<dyn MechanicalModel>,
    stiffness: DMatrix<f64>,
    motor_input: DMatrix<f64>,
}

impl FjrModel {
    /// Panics if the dimensions are inconsistent or the stiffness is not
    /// symmetric positive definite.
    pub fn new(
        link: Box<dyn MechanicalModel>,
        motor: Box<dyn MechanicalModel>,
        stiffness: DMatrix<f64>,
        motor_input: DMatrix<f64>,
    ) -> Self {
        let n = link.dof();
        assert_eq!(
            n,
            motor.dof(),
            "link and motor must have the same number of joints"
        );
        assert_eq!(stiffness.nrows(), n);
        assert_eq!(stiffness.ncols(), n);
        assert!(
            (stiffness.clone() - stiffness.transpose()).norm() == 0.0,
            "stiffness must be symmetric"
        );
        assert!(
            stiffness.clone().cholesky().is_some(),
            "stiffness must be positive definite"
        );
        assert_eq!(motor_input.nrows(), n);
        assert_eq!(motor_input.ncols(), n);
        assert!(
            motor_input.clone().lu().is_invertible(),
            "motor input matrix must be full rank"
        );
        Self {
            link,
            motor,
            stiffness,
            motor_input,
        }
    }

    pub fn n_link(&self) -> usize {
        self.link.dof()
    }

    pub fn n_motor(&self) -> usize {
        self.motor.dof()
    }

    pub fn link(&self) -> &dyn MechanicalModel {
        self.link.as_ref()
    }

    pub fn motor(&self) -> &dyn MechanicalModel {
        self.motor.as_ref()
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    pub fn motor_input(&self) -> &DMatrix<f64> {
        &self.motor_input
    }

    pub fn split(&self, x: &PhaseState) -> FjrParts {
        let nl = self.n_link();
        let nm = self.n_motor();
        FjrParts {
            q_link: x.q.rows(0, nl).into_owned(),
            q_motor: x.q.rows(nl, nm).into_owned(),
            p_link: x.p.rows(0, nl).into_owned(),
            p_motor: x.p.rows(nl, nm).into_owned(),
        }
    }

    pub fn join(&self, parts: &FjrParts) -> PhaseState {
        let nl = self.n_link();
        let nm = self.n_motor();
        let mut q = DVector::zeros(nl + nm);
        let mut p = DVector::zeros(nl + nm);
        q.rows_mut(0, nl).copy_from(&parts.q_link);
        q.rows_mut(nl, nm).copy_from(&parts.q_motor);
        p.rows_mut(0, nl).copy_from(&parts.p_link);
        p.rows_mut(nl, nm).copy_from(&parts.p_motor);
        PhaseState { q, p }
    }

    fn block_diag(&self, a: DMatrix<f64>, b: DMatrix<f64>) -> DMatrix<f64> {
        let nl = self.n_link();
        let nm = self.n_motor();
        let mut out = DMatrix::zeros(nl + nm, nl + nm);
        out.view_mut((0, 0), (nl, nl)).copy_from(&a);
        out.view_mut((nl, nl), (nm, nm)).copy_from(&b);
        out
    }
}

impl MechanicalModel for FjrModel {
    fn dof(&self) -> usize {
        self.n_link() + self.n_motor()
    }

    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let (ql, qm) = split_vec(q, self.n_link());
        self.block_diag(self.link.inertia(&ql), self.motor.inertia(&qm))
    }

    fn inertia_directional_derivative(&self, q: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let nl = self.n_link();
        let (ql, qm) = split_vec(q, nl);
        let (vl, vm) = split_vec(v, nl);
        self.block_diag(
            self.link.inertia_directional_derivative(&ql, &vl),
            self.motor.inertia_directional_derivative(&qm, &vm),
        )
    }

    fn constant_inertia(&self) -> bool {
        self.link.constant_inertia() && self.motor.constant_inertia()
    }

    fn damping(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let (ql, qm) = split_vec(q, self.n_link());
        self.block_diag(self.link.damping(&ql), self.motor.damping(&qm))
    }

    fn potential(&self, q: &DVector<f64>) -> f64 {
        let (ql, qm) = split_vec(q, self.n_link());
        let z = &qm - &ql;
        self.link.potential(&ql) + self.motor.potential(&qm) + 0.5 * z.dot(&(&self.stiffness * &z))
    }

    fn potential_gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        let nl = self.n_link();
        let nm = self.n_motor();
        let (ql, qm) = split_vec(q, nl);
        let z = &qm - &ql;
        let kz = &self.stiffness * &z;
        let mut out = DVector::zeros(nl + nm);
        out.rows_mut(0, nl)
            .copy_from(&(self.link.potential_gradient(&ql) - &kz));
        out.rows_mut(nl, nm)
            .copy_from(&(self.motor.potential_gradient(&qm) + &kz));
        out
    }

    fn potential_hessian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let nl = self.n_link();
        let nm = self.n_motor();
        let (ql, qm) = split_vec(q, nl);
        let mut out = DMatrix::zeros(nl + nm, nl + nm);
        out.view_mut((0, 0), (nl, nl))
            .copy_from(&(self.link.potential_hessian(&ql) + &self.stiffness));
        out.view_mut((nl, nl), (nm, nm))
            .copy_from(&(self.motor.potential_hessian(&qm) + &self.stiffness));
        out.view_mut((0, nl), (nl, nm)).copy_from(&(-&self.stiffness));
        out.view_mut((nl, 0), (nm, nl)).copy_from(&(-&self.stiffness));
        out
    }

    fn potential_third_directional(&self, q: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        let nl = self.n_link();
        let (ql, qm) = split_vec(q, nl);
        let (wl, wm) = split_vec(w, nl);
        self.block_diag(
            self.link.potential_third_directional(&ql, &wl),
            self.motor.potential_third_directional(&qm, &wm),
        )
    }

    fn potential_fourth_bidirectional(
        &self,
        q: &DVector<f64>,
        a: &DVector<f64>,
        b: &DVector<f64>,
    ) -> DMatrix<f64> {
        let nl = self.n_link();
        let (ql, qm) = split_vec(q, nl);
        let (al, am) = split_vec(a, nl);
        let (bl, bm) = split_vec(b, nl);
        self.block_diag(
            self.link.potential_fourth_bidirectional(&ql, &al, &bl),
            self.motor.potential_fourth_bidirectional(&qm, &am, &bm),
        )
    }

    fn input_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let nl = self.n_link();
        let nm = self.n_motor();
        let (_, _qm) = split_vec(q, nl);
        let mut out = DMatrix::zeros(nl + nm, nm);
        out.view_mut((nl, 0), (nm, nm)).copy_from(&self.motor_input);
        out
    }

    fn input_dim(&self) -> usize {
        self.n_motor()
    }
}

fn split_vec(v: &DVector<f64>, nl: usize) -> (DVector<f64>, DVector<f64>) {
    (v.rows(0, nl).into_owned(), v.rows(nl, v.len() - nl).into_owned())
}

/// Parameters of the bundled single-joint benchmark: a gravity-loaded link
/// driven through one elastic joint by a motor with direct torque input.
#[derive(Debug, Clone, Copy)]
pub struct SingleJointParams {
    /// Link inertia [kg·m²].
    pub link_inertia: f64,
    /// Rotor inertia [kg·m²].
    pub rotor_inertia: f64,
    /// Link-side viscous friction [N·m·s/rad].
    pub link_friction: f64,
    /// Rotor-side viscous friction [N·m·s/rad].
    pub rotor_friction: f64,
    /// Peak gravity torque `m g l` on the link [N·m].
    pub nominal_load: f64,
    /// Joint stiffness [N·m/rad].
    pub stiffness: f64,
}

impl Default for SingleJointParams {
    fn default() -> Self {
        Self {
            link_inertia: 0.031,
            rotor_inertia: 0.004,
            link_friction: 0.2,
            rotor_friction: 0.007,
            nominal_load: 0.8,
            stiffness: 31.0,
        }
    }
}

impl SingleJointParams {
    pub fn with_stiffness(mut self, k: f64) -> Self {
        self.stiffness = k;
        self
    }

    pub fn build(self) -> FjrModel {
        FjrModel::new(
            Box::new(super::models::GravityPendulum::new(
                self.link_inertia,
                self.link_friction,
                self.nominal_load,
            )),
            Box::new(super::models::ConstantJoint::scalar(
                self.rotor_inertia,
                self.rotor_friction,
            )),
            DMatrix::from_element(1, 1, self.stiffness),
            DMatrix::identity(1, 1),
        )
    }

    /// Variant with a quadratic link potential of the same local stiffness
    /// as the gravity load; the closed loop is affine with this link.
    pub fn build_linear(self) -> FjrModel {
        FjrModel::new(
            Box::new(super::models::QuadraticLink::new(
                self.link_inertia,
                self.link_friction,
                self.nominal_load,
            )),
            Box::new(super::models::ConstantJoint::scalar(
                self.rotor_inertia,
                self.rotor_friction,
            )),
            DMatrix::from_element(1, 1, self.stiffness),
            DMatrix::identity(1, 1),
        )
    }
}
