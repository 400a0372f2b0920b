//! A small zoo of mechanical models: the joint models used by the
//! flexible-joint benchmark, and a two-link arm fixture whose inertia
//! actually depends on the configuration, for exercising the gyroscopic
//! code paths.

use nalgebra::{DMatrix, DVector};

use super::MechanicalModel;

/// Single rigid body with constant inertia and damping and no potential.
/// Typical use: the motor side of a flexible joint.
#[derive(Debug, Clone)]
pub struct ConstantJoint {
    inertia: DMatrix<f64>,
    damping: DMatrix<f64>,
}

impl ConstantJoint {
    pub fn new(inertia: DMatrix<f64>, damping: DMatrix<f64>) -> Self {
        assert_eq!(inertia.nrows(), inertia.ncols());
        assert_eq!(damping.nrows(), inertia.nrows());
        Self { inertia, damping }
    }

    pub fn scalar(inertia: f64, damping: f64) -> Self {
        Self::new(
            DMatrix::from_element(1, 1, inertia),
            DMatrix::from_element(1, 1, damping),
        )
    }
}

impl MechanicalModel for ConstantJoint {
    fn dof(&self) -> usize {
        self.inertia.nrows()
    }

    fn inertia(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        self.inertia.clone()
    }

    fn inertia_directional_derivative(&self, _q: &DVector<f64>, _v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dof(), self.dof())
    }

    fn constant_inertia(&self) -> bool {
        true
    }

    fn damping(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        self.damping.clone()
    }

    fn potential(&self, _q: &DVector<f64>) -> f64 {
        0.0
    }

    fn potential_gradient(&self, _q: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dof())
    }

    fn potential_hessian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dof(), self.dof())
    }

    fn potential_third_directional(&self, _q: &DVector<f64>, _w: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dof(), self.dof())
    }

    fn potential_fourth_bidirectional(
        &self,
        _q: &DVector<f64>,
        _a: &DVector<f64>,
        _b: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.dof(), self.dof())
    }

    fn input_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dof(), self.dof())
    }
}

/// Scalar link under a constant gravity load: `P(q) = load · (1 − cos q)`,
/// normalized so `P(0) = 0`. The gravity torque is `load · sin q`.
#[derive(Debug, Clone)]
pub struct GravityPendulum {
    inertia: f64,
    damping: f64,
    load: f64,
}

impl GravityPendulum {
    /// `load` is the peak gravity torque `m g l` in N·m.
    pub fn new(inertia: f64, damping: f64, load: f64) -> Self {
        assert!(inertia > 0.0 && damping >= 0.0);
        Self {
            inertia,
            damping,
            load,
        }
    }
}

impl MechanicalModel for GravityPendulum {
    fn dof(&self) -> usize {
        1
    }

    fn inertia(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.inertia)
    }

    fn inertia_directional_derivative(&self, _q: &DVector<f64>, _v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn constant_inertia(&self) -> bool {
        true
    }

    fn damping(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.damping)
    }

    fn potential(&self, q: &DVector<f64>) -> f64 {
        self.load * (1.0 - q[0].cos())
    }

    fn potential_gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.load * q[0].sin())
    }

    fn potential_hessian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.load * q[0].cos())
    }

    fn potential_third_directional(&self, q: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -self.load * q[0].sin() * w[0])
    }

    fn potential_fourth_bidirectional(
        &self,
        q: &DVector<f64>,
        a: &DVector<f64>,
        b: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -self.load * q[0].cos() * a[0] * b[0])
    }

    fn input_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }
}

/// Scalar link with a linear spring potential `P(q) = ½ k q²`. The whole
/// closed loop becomes affine with this link, which makes variational and
/// finite-difference flows agree exactly; useful as a control case in tests.
#[derive(Debug, Clone)]
pub struct QuadraticLink {
    inertia: f64,
    damping: f64,
    spring: f64,
}

impl QuadraticLink {
    pub fn new(inertia: f64, damping: f64, spring: f64) -> Self {
        assert!(inertia > 0.0 && damping >= 0.0);
        Self {
            inertia,
            damping,
            spring,
        }
    }
}

impl MechanicalModel for QuadraticLink {
    fn dof(&self) -> usize {
        1
    }

    fn inertia(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.inertia)
    }

    fn inertia_directional_derivative(&self, _q: &DVector<f64>, _v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn constant_inertia(&self) -> bool {
        true
    }

    fn damping(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.damping)
    }

    fn potential(&self, q: &DVector<f64>) -> f64 {
        0.5 * self.spring * q[0] * q[0]
    }

    fn potential_gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.spring * q[0])
    }

    fn potential_hessian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.spring)
    }

    fn potential_third_directional(&self, _q: &DVector<f64>, _w: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn potential_fourth_bidirectional(
        &self,
        _q: &DVector<f64>,
        _a: &DVector<f64>,
        _b: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn input_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }
}

/// Planar two-link arm with the standard configuration-dependent inertia
///
/// ```text
/// M(q) = [ a1 + 2 a3 cos q2,  a2 + a3 cos q2 ]
///        [ a2 + a3 cos q2,    a2             ]
/// ```
///
/// This is a verification fixture: its parameters are arbitrary constants
/// chosen to keep `M` positive definite for every `q`. It exists to exercise
/// the `Ṁ ≠ 0` and gyroscopic paths that constant-inertia joints never reach.
#[derive(Debug, Clone)]
pub struct TwoLinkArm {
    a1: f64,
    a2: f64,
    a3: f64,
    damping: f64,
    g1: f64,
    g2: f64,
}

impl Default for TwoLinkArm {
    fn default() -> Self {
        // det M = a1 a2 - a2^2 - a3^2 cos^2 q2 >= 1.25 with these values.
        Self {
            a1: 2.5,
            a2: 1.0,
            a3: 0.5,
            damping: 0.1,
            g1: 9.0,
            g2: 3.0,
        }
    }
}

impl MechanicalModel for TwoLinkArm {
    fn dof(&self) -> usize {
        2
    }

    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let c2 = q[1].cos();
        DMatrix::from_row_slice(
            2,
            2,
            &[
                self.a1 + 2.0 * self.a3 * c2,
                self.a2 + self.a3 * c2,
                self.a2 + self.a3 * c2,
                self.a2,
            ],
        )
    }

    fn inertia_directional_derivative(&self, q: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let s2 = q[1].sin();
        let f = -self.a3 * s2 * v[1];
        DMatrix::from_row_slice(2, 2, &[2.0 * f, f, f, 0.0])
    }

    fn damping(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal_element(2, 2, self.damping)
    }

    fn potential(&self, q: &DVector<f64>) -> f64 {
        self.g1 * (1.0 - q[0].cos()) + self.g2 * (1.0 - (q[0] + q[1]).cos())
    }

    fn potential_gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        let s1 = q[0].sin();
        let s12 = (q[0] + q[1]).sin();
        DVector::from_vec(vec![self.g1 * s1 + self.g2 * s12, self.g2 * s12])
    }

    fn potential_hessian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let c1 = q[0].cos();
        let c12 = (q[0] + q[1]).cos();
        DMatrix::from_row_slice(
            2,
            2,
            &[
                self.g1 * c1 + self.g2 * c12,
                self.g2 * c12,
                self.g2 * c12,
                self.g2 * c12,
            ],
        )
    }

    fn input_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
}
