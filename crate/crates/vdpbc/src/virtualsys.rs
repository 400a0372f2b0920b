//! Virtual systems and their variational (prolonged) dynamics.
//!
//! To every mechanical system we associate a *virtual system*: a copy of the
//! dynamics in a state `x_v`, parametrized by the actual trajectory `x(t)`.
//! The kinetic metric, damping, gyroscopic terms and input map are anchored
//! at the actual state while the potential force is evaluated at the virtual
//! state:
//!
//! ```text
//! q̇_v = M⁻¹(q) p_v
//! ṗ_v = −∂P/∂q(q_v) − [E(x) + D(q)] M⁻¹(q) p_v + B(q) u
//! ```
//!
//! Setting `x_v = x` recovers the plant exactly, so every plant solution is
//! also a virtual-system solution. The point of the construction is that
//! convergence statements proved for the virtual system in `x_v` — through
//! its *variational* dynamics, which evolve a tangent vector `δx_v`
//! alongside — transfer to the plant.
//!
//! The variational dynamics of the virtual system are linear in `δx_v`:
//!
//! ```text
//! δẋ_v = [J_v(x) − R_v(x)] · ∂²H_v/∂x_v² (x_v, x) · δx_v + g(x) δu
//! ```
//!
//! with a skew interconnection `J_v`, a symmetric (not necessarily definite)
//! `R_v`, and the block-diagonal Hessian of the virtual energy. Contraction
//! is measured through a quadratic storage function on the tangent bundle,
//! [`DifferentialStorage`].

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::phmech::{self, MechanicalModel, PhError, PhaseDerivative, PhaseState};

/// Errors raised by storage-function evaluation.
#[derive(Debug, Error)]
pub enum CertificateError {
    #[error("differential storage metric is not positive definite at the query point")]
    MetricNotPositiveDefinite,
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// A `(x_v, δx_v)` pair advanced by the prolonged dynamics.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub x: PhaseState,
    pub dx: DVector<f64>,
}

impl VariationalState {
    pub fn new(x: PhaseState, dx: DVector<f64>) -> Self {
        assert_eq!(dx.len(), 2 * x.dof(), "tangent vector dimension");
        Self { x, dx }
    }
}

/// The virtual system associated to a mechanical model.
pub struct VirtualMechanicalSystem<'a> {
    model: &'a dyn MechanicalModel,
}

impl<'a> VirtualMechanicalSystem<'a> {
    pub fn new(model: &'a dyn MechanicalModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &dyn MechanicalModel {
        self.model
    }

    /// Skew interconnection matrix `J_v(x) = [0, I; −I, −S(x)]`.
    pub fn interconnection(&self, x: &PhaseState) -> Result<DMatrix<f64>, PhError> {
        let n = self.model.dof();
        let qdot = self.anchor_velocity(x)?;
        let s = phmech::gyroscopic_factor(self.model, &x.q, &qdot);
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            j[(i, n + i)] = 1.0;
            j[(n + i, i)] = -1.0;
        }
        j.view_mut((n, n), (n, n)).copy_from(&(-s));
        Ok(j)
    }

    /// Symmetric matrix `R_v(x) = [0, 0; 0, D(q) − ½Ṁ(q)]`; indefinite in
    /// general, which is why the pair `(J_v, R_v)` is only "pH-like".
    pub fn dissipation(&self, x: &PhaseState) -> Result<DMatrix<f64>, PhError> {
        let n = self.model.dof();
        let qdot = self.anchor_velocity(x)?;
        let mdot = self.model.inertia_directional_derivative(&x.q, &qdot);
        let block = self.model.damping(&x.q) - mdot * 0.5;
        let mut r = DMatrix::zeros(2 * n, 2 * n);
        r.view_mut((n, n), (n, n)).copy_from(&block);
        Ok(r)
    }

    /// Virtual energy `H_v(x_v, x) = ½ p_vᵀ M⁻¹(q) p_v + P(q_v)`.
    pub fn hamiltonian(&self, x_v: &PhaseState, x: &PhaseState) -> Result<f64, PhError> {
        let m_inv = self.inverse_inertia(&x.q)?;
        Ok(0.5 * x_v.p.dot(&(&m_inv * &x_v.p)) + self.model.potential(&x_v.q))
    }

    /// Gradient of the virtual energy with respect to `x_v`.
    pub fn gradient(&self, x_v: &PhaseState, x: &PhaseState) -> Result<DVector<f64>, PhError> {
        let n = self.model.dof();
        let m_inv = self.inverse_inertia(&x.q)?;
        let mut g = DVector::zeros(2 * n);
        g.rows_mut(0, n)
            .copy_from(&self.model.potential_gradient(&x_v.q));
        g.rows_mut(n, n).copy_from(&(&m_inv * &x_v.p));
        Ok(g)
    }

    /// Hessian of the virtual energy: `blockdiag(∂²P(q_v), M⁻¹(q))`.
    pub fn hessian(&self, x_v: &PhaseState, x: &PhaseState) -> Result<DMatrix<f64>, PhError> {
        let n = self.model.dof();
        let m_inv = self.inverse_inertia(&x.q)?;
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        h.view_mut((0, 0), (n, n))
            .copy_from(&self.model.potential_hessian(&x_v.q));
        h.view_mut((n, n), (n, n)).copy_from(&m_inv);
        Ok(h)
    }

    /// Virtual vector field; equals the plant field when `x_v = x`.
    pub fn vector_field(
        &self,
        x_v: &PhaseState,
        x: &PhaseState,
        u: &DVector<f64>,
    ) -> Result<PhaseDerivative, PhError> {
        phmech::mechanics_rhs(self.model, x_v, x, u)
    }

    /// Virtual natural output `y_v = B(q)ᵀ M⁻¹(q) p_v`.
    pub fn output(&self, x_v: &PhaseState, x: &PhaseState) -> Result<DVector<f64>, PhError> {
        let m_inv = self.inverse_inertia(&x.q)?;
        Ok(self.model.input_matrix(&x.q).transpose() * (m_inv * &x_v.p))
    }

    /// One evaluation of the prolonged dynamics: the virtual field together
    /// with its variational companion under the tangent input `du`.
    pub fn prolonged_field(
        &self,
        vs: &VariationalState,
        x: &PhaseState,
        u: &DVector<f64>,
        du: &DVector<f64>,
    ) -> Result<(PhaseDerivative, DVector<f64>), PhError> {
        let dx_dt = self.vector_field(&vs.x, x, u)?;
        let gen = self.variational_generator(&vs.x, x)?;
        let b = self.model.input_matrix(&x.q);
        let n = self.model.dof();
        let mut ddx = &gen * &vs.dx;
        ddx.rows_mut(n, n).axpy(1.0, &(&b * du), 1.0);
        Ok((dx_dt, ddx))
    }

    /// `[J_v − R_v] · ∂²H_v/∂x_v²`, the generator of the open-loop
    /// variational dynamics.
    pub fn variational_generator(
        &self,
        x_v: &PhaseState,
        x: &PhaseState,
    ) -> Result<DMatrix<f64>, PhError> {
        let j = self.interconnection(x)?;
        let r = self.dissipation(x)?;
        let h = self.hessian(x_v, x)?;
        Ok((j - r) * h)
    }

    /// Variational output `δy_v = g(x)ᵀ ∂²H_v/∂x_v² δx_v`.
    pub fn variational_output(
        &self,
        x_v: &PhaseState,
        x: &PhaseState,
        dx: &DVector<f64>,
    ) -> Result<DVector<f64>, PhError> {
        let n = self.model.dof();
        let h = self.hessian(x_v, x)?;
        let hd = h * dx;
        Ok(self.model.input_matrix(&x.q).transpose() * hd.rows(n, n).into_owned())
    }

    fn inverse_inertia(&self, q: &DVector<f64>) -> Result<DMatrix<f64>, PhError> {
        self.model
            .inertia(q)
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| PhError::SingularInertia {
                q: q.iter().copied().collect(),
            })
    }

    fn anchor_velocity(&self, x: &PhaseState) -> Result<DVector<f64>, PhError> {
        Ok(self.inverse_inertia(&x.q)? * &x.p)
    }
}

/// Position-metric function of the position error and time.
pub type MetricFn = Box<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// Position-block weight of the storage metric; the momentum block is
/// always the inverse inertia of the anchoring state.
pub enum PositionMetric {
    Constant(DMatrix<f64>),
    /// Accepted by the storage interface, but the shipped controllers
    /// require a constant metric (their integral feedback term is
    /// closed-form only in that case).
    StateDependent(MetricFn),
}

/// Quadratic storage function on the tangent bundle,
/// `V = ½ δx̃ᵀ blockdiag(Π, M⁻¹(q)) δx̃`.
pub struct DifferentialStorage<'a> {
    model: &'a dyn MechanicalModel,
    position_metric: PositionMetric,
}

impl<'a> DifferentialStorage<'a> {
    pub fn constant(model: &'a dyn MechanicalModel, pi: DMatrix<f64>) -> Self {
        assert_eq!(pi.nrows(), model.dof());
        assert_eq!(pi.ncols(), model.dof());
        Self {
            model,
            position_metric: PositionMetric::Constant(pi),
        }
    }

    pub fn state_dependent(
        model: &'a dyn MechanicalModel,
        f: impl Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            model,
            position_metric: PositionMetric::StateDependent(Box::new(f)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.position_metric, PositionMetric::Constant(_))
    }

    /// Assembled `2n×2n` metric at a query point. `q_err` feeds the
    /// position block, `q` the inverse-inertia block.
    pub fn metric(
        &self,
        q_err: &DVector<f64>,
        q: &DVector<f64>,
        t: f64,
    ) -> Result<DMatrix<f64>, CertificateError> {
        let n = self.model.dof();
        let pi = match &self.position_metric {
            PositionMetric::Constant(m) => m.clone(),
            PositionMetric::StateDependent(f) => f(q_err, t),
        };
        let m_inv = self
            .model
            .inertia(q)
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(CertificateError::MetricNotPositiveDefinite)?;
        let mut g = DMatrix::zeros(2 * n, 2 * n);
        g.view_mut((0, 0), (n, n)).copy_from(&pi);
        g.view_mut((n, n), (n, n)).copy_from(&m_inv);
        if g.clone().cholesky().is_none() {
            return Err(CertificateError::MetricNotPositiveDefinite);
        }
        Ok(g)
    }

    /// Storage value `½ δx̃ᵀ G δx̃`; zero exactly when `δx̃ = 0`.
    pub fn value(
        &self,
        q_err: &DVector<f64>,
        q: &DVector<f64>,
        dx_err: &DVector<f64>,
        t: f64,
    ) -> Result<f64, CertificateError> {
        let n = self.model.dof();
        if dx_err.len() != 2 * n {
            return Err(CertificateError::DimensionMismatch {
                what: "tangent vector",
                expected: 2 * n,
                got: dx_err.len(),
            });
        }
        let g = self.metric(q_err, q, t)?;
        Ok(0.5 * dx_err.dot(&(&g * dx_err)))
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::phmech::models::TwoLinkArm;
    use crate::phmech::{ph_vector_field, SingleJointParams};

    fn state(q: &[f64], p: &[f64]) -> PhaseState {
        PhaseState::new(DVector::from_row_slice(q), DVector::from_row_slice(p)).unwrap()
    }

    #[test]
    fn virtual_field_reduces_to_plant_exactly() {
        let model = SingleJointParams::default().build();
        let vsys = VirtualMechanicalSystem::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = state(
                &[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                &[rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
            );
            let u = DVector::from_element(1, rng.random_range(-5.0..5.0));
            let virt = vsys.vector_field(&x, &x, &u).unwrap().to_vector();
            let plant = ph_vector_field(&model, &x, &u).unwrap().to_vector();
            assert_eq!((virt - plant).norm(), 0.0);
        }
    }

    #[test]
    fn virtual_field_on_deflected_virtual_state() {
        let model = SingleJointParams::default().build();
        let vsys = VirtualMechanicalSystem::new(&model);
        let x = PhaseState::zeros(2);
        let x_v = state(&[0.0, 0.1], &[0.0, 0.0]);
        let d = vsys.vector_field(&x_v, &x, &DVector::zeros(1)).unwrap();
        assert_relative_eq!(d.dp[0], 3.1, max_relative = 1e-12);
        assert_relative_eq!(d.dp[1], -3.1, max_relative = 1e-12);
    }

    #[test]
    fn input_enters_motor_momentum_rows_only() {
        let model = SingleJointParams::default().build();
        let vsys = VirtualMechanicalSystem::new(&model);
        let x = state(&[0.3, -0.4], &[0.01, 0.002]);
        let x_v = state(&[-0.2, 0.6], &[0.02, -0.001]);
        let u0 = DVector::from_element(1, 1.5);
        let du = 0.7;
        let base = vsys.vector_field(&x_v, &x, &u0).unwrap().to_vector();
        let shifted = vsys
            .vector_field(&x_v, &x, &DVector::from_element(1, 1.5 + du))
            .unwrap()
            .to_vector();
        let diff = shifted - base;
        assert_relative_eq!(diff[3], du, max_relative = 1e-12);
        assert_relative_eq!(diff.rows(0, 3).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn structure_matrices_have_exact_symmetry() {
        let model = TwoLinkArm::default();
        let vsys = VirtualMechanicalSystem::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let x = state(
                &[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            );
            let j = vsys.interconnection(&x).unwrap();
            let r = vsys.dissipation(&x).unwrap();
            assert_eq!((j.clone() + j.transpose()).norm(), 0.0);
            assert_eq!((r.clone() - r.transpose()).norm(), 0.0);
        }
    }

    #[test]
    fn variational_generator_matches_finite_difference_jacobian() {
        // Central differences of the virtual field with respect to x_v.
        for model in [
            SingleJointParams::default().build(),
            SingleJointParams::default().with_stiffness(3.1).build(),
        ] {
            let vsys = VirtualMechanicalSystem::new(&model);
            let x = state(&[0.2, -0.3], &[0.01, -0.002]);
            let x_v = state(&[0.5, 0.1], &[-0.02, 0.001]);
            let u = DVector::from_element(1, 0.4);
            let gen = vsys.variational_generator(&x_v, &x).unwrap();
            let mut fd = DMatrix::zeros(4, 4);
            let base = x_v.to_vector();
            for col in 0..4 {
                let h = 1e-6;
                let mut vp = base.clone();
                let mut vm = base.clone();
                vp[col] += h;
                vm[col] -= h;
                let fp = vsys
                    .vector_field(&PhaseState::from_vector(&vp), &x, &u)
                    .unwrap()
                    .to_vector();
                let fm = vsys
                    .vector_field(&PhaseState::from_vector(&vm), &x, &u)
                    .unwrap()
                    .to_vector();
                fd.set_column(col, &((fp - fm) / (2.0 * h)));
            }
            assert_relative_eq!(gen, fd, epsilon = 1e-7, max_relative = 1e-5);
        }
    }

    #[test]
    fn prolonged_field_at_zero_tangent_is_zero() {
        let model = SingleJointParams::default().build();
        let vsys = VirtualMechanicalSystem::new(&model);
        let vs = VariationalState::new(state(&[0.3, 0.2], &[0.01, 0.0]), DVector::zeros(4));
        let x = state(&[0.1, 0.0], &[0.0, 0.001]);
        let (_, ddx) = vsys
            .prolonged_field(&vs, &x, &DVector::zeros(1), &DVector::zeros(1))
            .unwrap();
        assert_eq!(ddx.norm(), 0.0);
    }

    #[test]
    fn prolonged_field_hessian_rows() {
        // A unit motor-position perturbation at the origin pushes the
        // variational momenta with the full joint stiffness.
        let model = SingleJointParams::default().build();
        let vsys = VirtualMechanicalSystem::new(&model);
        let mut dx = DVector::zeros(4);
        dx[1] = 1.0;
        let vs = VariationalState::new(PhaseState::zeros(2), dx);
        let x = PhaseState::zeros(2);
        let (_, ddx) = vsys
            .prolonged_field(&vs, &x, &DVector::zeros(1), &DVector::zeros(1))
            .unwrap();
        assert_relative_eq!(ddx[2], 31.0, max_relative = 1e-12);
        assert_relative_eq!(ddx[3], -31.0, max_relative = 1e-12);
        assert_eq!(ddx.rows(0, 2).norm(), 0.0);
    }

    #[test]
    fn storage_value_examples() {
        let model = SingleJointParams::default().build();
        let pi = DMatrix::from_diagonal(&DVector::from_vec(vec![20.0, 60.0]));
        let ds = DifferentialStorage::constant(&model, pi);
        let q0 = DVector::zeros(2);
        assert_eq!(ds.value(&q0, &q0, &DVector::zeros(4), 0.0).unwrap(), 0.0);
        let mut d = DVector::zeros(4);
        d[0] = 1.0;
        assert_relative_eq!(
            ds.value(&q0, &q0, &d, 0.0).unwrap(),
            10.0,
            max_relative = 1e-12
        );
        let mut d = DVector::zeros(4);
        d[2] = 0.031;
        assert_relative_eq!(
            ds.value(&q0, &q0, &d, 0.0).unwrap(),
            0.0155,
            max_relative = 1e-12
        );
    }

    #[test]
    fn storage_rejects_indefinite_metric() {
        let model = SingleJointParams::default().build();
        let pi = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 60.0]));
        let ds = DifferentialStorage::constant(&model, pi);
        let q0 = DVector::zeros(2);
        let err = ds.value(&q0, &q0, &DVector::from_element(4, 1.0), 0.0);
        assert!(matches!(
            err,
            Err(CertificateError::MetricNotPositiveDefinite)
        ));
    }

    #[test]
    fn storage_rayleigh_quotients_stay_in_block_spectrum() {
        // With constant blocks the metric eigenvalues are those of
        // diag(20, 60, 1/0.031, 1/0.004); quotients must lie between the
        // extremes on any sample of the test box.
        let model = SingleJointParams::default().build();
        let pi = DMatrix::from_diagonal(&DVector::from_vec(vec![20.0, 60.0]));
        let ds = DifferentialStorage::constant(&model, pi);
        let (c1, c2) = (20.0, 250.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let q0 = DVector::zeros(2);
        for _ in 0..300 {
            let q_err = DVector::from_vec(vec![
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            ]);
            let d = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            if d.norm() < 1e-6 {
                continue;
            }
            let v = ds.value(&q_err, &q0, &d, 0.0).unwrap();
            let quotient = 2.0 * v / d.norm_squared();
            assert!(quotient >= c1 * (1.0 - 1e-12) && quotient <= c2 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn virtual_energy_gradient_consistency() {
        // Gradient against finite differences of H_v in x_v.
        let model = TwoLinkArm::default();
        let vsys = VirtualMechanicalSystem::new(&model);
        let x = state(&[0.4, -0.2], &[0.3, 0.1]);
        let x_v = state(&[-0.3, 0.8], &[0.2, -0.4]);
        let g = vsys.gradient(&x_v, &x).unwrap();
        let base = x_v.to_vector();
        for i in 0..4 {
            let h = 1e-6;
            let mut vp = base.clone();
            let mut vm = base.clone();
            vp[i] += h;
            vm[i] -= h;
            let hp = vsys.hamiltonian(&PhaseState::from_vector(&vp), &x).unwrap();
            let hm = vsys.hamiltonian(&PhaseState::from_vector(&vm), &x).unwrap();
            assert_relative_eq!(
                g[i],
                (hp - hm) / (2.0 * h),
                epsilon = 1e-8,
                max_relative = 1e-6
            );
        }
    }
}
