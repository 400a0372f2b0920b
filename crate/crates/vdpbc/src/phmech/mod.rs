//! Port-Hamiltonian mechanics: energy, structure matrices, and vector fields.
//!
//! A mechanical system with configuration `q` and momentum `p = M(q) q̇` is
//! described here by its total energy
//!
//! ```text
//! H(q, p) = ½ pᵀ M⁻¹(q) p + P(q)
//! ```
//!
//! together with damping `D(q)` and an input map `B(q)`. The dynamics are
//!
//! ```text
//! q̇ = M⁻¹(q) p
//! ṗ = −∂P/∂q − [E(q,p) + D(q)] M⁻¹(q) p + B(q) u
//! ```
//!
//! where `E(q,p) = S(q,p) − ½ Ṁ(q)` collects the inertia-variation and
//! gyroscopic forces. `S` is skew-symmetric, and the forces `E M⁻¹ p` are
//! workless: they never change the energy balance
//!
//! ```text
//! dH/dt = −(M⁻¹p)ᵀ D (M⁻¹p) + yᵀ u,    y = Bᵀ M⁻¹ p.
//! ```
//!
//! [`workless_matrix`] builds `E` from the Christoffel symbols of `M`, and
//! the checks in [`crate::verify`] certify the underlying identities
//! numerically against finite-difference oracles.

mod fjr;
pub mod models;

pub use fjr::{FjrModel, FjrParts, SingleJointParams};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Errors from evaluating mechanical quantities.
#[derive(Debug, Error)]
pub enum PhError {
    #[error("state contains non-finite components")]
    NonFiniteState,
    #[error("input contains non-finite components")]
    NonFiniteInput,
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("inertia matrix is singular or not positive definite at q = {q:?}")]
    SingularInertia { q: Vec<f64> },
}

/// A point `(q, p)` on the phase space of a mechanical system.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl PhaseState {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Result<Self, PhError> {
        if q.len() != p.len() {
            return Err(PhError::DimensionMismatch {
                what: "phase state momentum",
                expected: q.len(),
                got: p.len(),
            });
        }
        Ok(Self { q, p })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            q: DVector::zeros(n),
            p: DVector::zeros(n),
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }

    /// Flattens to `[q; p]`, the layout used by the integrators.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.dof();
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&self.q);
        out.rows_mut(n, n).copy_from(&self.p);
        out
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = v.len() / 2;
        Self {
            q: v.rows(0, n).into_owned(),
            p: v.rows(n, n).into_owned(),
        }
    }
}

/// Time derivative of a [`PhaseState`].
#[derive(Debug, Clone)]
pub struct PhaseDerivative {
    pub dq: DVector<f64>,
    pub dp: DVector<f64>,
}

impl PhaseDerivative {
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.dq.len();
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&self.dq);
        out.rows_mut(n, n).copy_from(&self.dp);
        out
    }
}

/// Description of a mechanical system through its energy and structure
/// matrices. All quantities are functions of the configuration (and, for the
/// inertia rate, a direction); implementations are expected to be pure and
/// immutable after construction.
///
/// Analytic derivatives should be supplied where available. The
/// finite-difference defaults exist so that verification code has a
/// model-independent path; they use central differences with a step scaled
/// by the configuration magnitude.
pub trait MechanicalModel: Send + Sync {
    /// Number of configuration coordinates.
    fn dof(&self) -> usize;

    /// Symmetric positive-definite inertia matrix `M(q)`.
    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64>;

    /// `Ṁ(q)` evaluated for `q̇ = v`; must be linear in `v`.
    fn inertia_directional_derivative(&self, q: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            let h = fd_step(q[i]);
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            out += (self.inertia(&qp) - self.inertia(&qm)) * (v[i] / (2.0 * h));
        }
        out
    }

    /// True when `M` does not depend on `q`. The tracking controller's
    /// reference-derivative chain is exact only in that case.
    fn constant_inertia(&self) -> bool {
        false
    }

    /// Symmetric positive-semidefinite damping matrix `D(q)`.
    fn damping(&self, q: &DVector<f64>) -> DMatrix<f64>;

    /// Potential energy `P(q)`.
    fn potential(&self, q: &DVector<f64>) -> f64;

    /// `∂P/∂q`.
    fn potential_gradient(&self, q: &DVector<f64>) -> DVector<f64>;

    /// `∂²P/∂q²`.
    fn potential_hessian(&self, q: &DVector<f64>) -> DMatrix<f64>;

    /// Directional derivative of the Hessian: `d/dt ∂²P(q(t))` with `q̇ = w`.
    fn potential_third_directional(&self, q: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            let h = fd_step(q[i]);
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            out += (self.potential_hessian(&qp) - self.potential_hessian(&qm)) * (w[i] / (2.0 * h));
        }
        out
    }

    /// Second directional derivative of the Hessian along `a` then `b`.
    fn potential_fourth_bidirectional(
        &self,
        q: &DVector<f64>,
        a: &DVector<f64>,
        b: &DVector<f64>,
    ) -> DMatrix<f64> {
        let n = self.dof();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            let h = fd_step(q[i]).sqrt();
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            out += (self.potential_third_directional(&qp, a)
                - self.potential_third_directional(&qm, a))
                * (b[i] / (2.0 * h));
        }
        out
    }

    /// Input force matrix `B(q)`, rank `m ≤ n`.
    fn input_matrix(&self, q: &DVector<f64>) -> DMatrix<f64>;

    /// Number of input channels (columns of `B`).
    fn input_dim(&self) -> usize {
        self.dof()
    }
}

fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

fn check_state(model: &dyn MechanicalModel, x: &PhaseState) -> Result<(), PhError> {
    if x.dof() != model.dof() {
        return Err(PhError::DimensionMismatch {
            what: "phase state",
            expected: model.dof(),
            got: x.dof(),
        });
    }
    if !x.is_finite() {
        return Err(PhError::NonFiniteState);
    }
    Ok(())
}

fn inverse_inertia(model: &dyn MechanicalModel, q: &DVector<f64>) -> Result<DMatrix<f64>, PhError> {
    let m = model.inertia(q);
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| PhError::SingularInertia {
            q: q.iter().copied().collect(),
        })
}

/// Total energy `H(x) = ½ pᵀ M⁻¹(q) p + P(q)`.
pub fn hamiltonian(model: &dyn MechanicalModel, x: &PhaseState) -> Result<f64, PhError> {
    check_state(model, x)?;
    let m_inv = inverse_inertia(model, &x.q)?;
    Ok(0.5 * x.p.dot(&(&m_inv * &x.p)) + model.potential(&x.q))
}

/// Energy gradient `(∂H/∂q, ∂H/∂p)`.
///
/// The position part expands the kinetic-energy gradient through the
/// workless-force matrix, `∂H/∂q = ∂P/∂q + E(q,p) M⁻¹ p`, so that models
/// only need inertia rates rather than configuration gradients of `M⁻¹`.
pub fn gradient_hamiltonian(
    model: &dyn MechanicalModel,
    x: &PhaseState,
) -> Result<(DVector<f64>, DVector<f64>), PhError> {
    check_state(model, x)?;
    let m_inv = inverse_inertia(model, &x.q)?;
    let qdot = &m_inv * &x.p;
    let e = workless_from_velocity(model, &x.q, &qdot);
    let dh_dq = model.potential_gradient(&x.q) + &e * &qdot;
    Ok((dh_dq, qdot))
}

/// Gyroscopic factor `S(q, q̇)`: the skew-symmetric matrix with
/// `S q̇ = ½ Ṁ q̇ − ∂/∂q(½ q̇ᵀ M q̇)`.
///
/// Built from Christoffel symbols of the first kind,
/// `S[k,j] = ½ Σᵢ (∂M/∂qⱼ[k,i] − ∂M/∂qₖ[i,j]) q̇ᵢ`,
/// and assembled from its upper triangle so skew-symmetry holds exactly.
pub fn gyroscopic_factor(
    model: &dyn MechanicalModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> DMatrix<f64> {
    let n = model.dof();
    let basis: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            model.inertia_directional_derivative(q, &e)
        })
        .collect();
    let mut s = DMatrix::zeros(n, n);
    for k in 0..n {
        for j in (k + 1)..n {
            let mut v = 0.0;
            for i in 0..n {
                v += 0.5 * (basis[j][(k, i)] - basis[k][(i, j)]) * qdot[i];
            }
            s[(k, j)] = v;
            s[(j, k)] = -v;
        }
    }
    s
}

fn workless_from_velocity(
    model: &dyn MechanicalModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> DMatrix<f64> {
    let s = gyroscopic_factor(model, q, qdot);
    let mdot = model.inertia_directional_derivative(q, qdot);
    s - mdot * 0.5
}

/// Workless-force matrix `E(q, p) = S(q, M⁻¹p) − ½ Ṁ(q)`.
///
/// Satisfies `∂/∂q(½ pᵀ M⁻¹ p) = E M⁻¹ p`; zero for constant inertia.
pub fn workless_matrix(model: &dyn MechanicalModel, x: &PhaseState) -> Result<DMatrix<f64>, PhError> {
    check_state(model, x)?;
    let m_inv = inverse_inertia(model, &x.q)?;
    let qdot = &m_inv * &x.p;
    Ok(workless_from_velocity(model, &x.q, &qdot))
}

/// Right-hand side of the mechanics, evaluated at a state `x_eval` while the
/// structure matrices (`M⁻¹` in the kinetic terms, `E`, `D`, `B`) are taken
/// at the anchoring state `x_anchor`. With both arguments equal this is the
/// plant vector field; with them distinct it is the associated virtual
/// system, which shares every solution of the plant.
pub(crate) fn mechanics_rhs(
    model: &dyn MechanicalModel,
    x_eval: &PhaseState,
    x_anchor: &PhaseState,
    u: &DVector<f64>,
) -> Result<PhaseDerivative, PhError> {
    check_state(model, x_eval)?;
    check_state(model, x_anchor)?;
    if u.len() != model.input_dim() {
        return Err(PhError::DimensionMismatch {
            what: "input",
            expected: model.input_dim(),
            got: u.len(),
        });
    }
    if !u.iter().all(|v| v.is_finite()) {
        return Err(PhError::NonFiniteInput);
    }
    let m_inv = inverse_inertia(model, &x_anchor.q)?;
    let qdot_anchor = &m_inv * &x_anchor.p;
    let e = workless_from_velocity(model, &x_anchor.q, &qdot_anchor);
    let d = model.damping(&x_anchor.q);
    let b = model.input_matrix(&x_anchor.q);

    let vel = &m_inv * &x_eval.p;
    let dp = -model.potential_gradient(&x_eval.q) - (&e + &d) * &vel + b * u;
    Ok(PhaseDerivative { dq: vel, dp })
}

/// Plant vector field `(q̇, ṗ)` under input `u`.
pub fn ph_vector_field(
    model: &dyn MechanicalModel,
    x: &PhaseState,
    u: &DVector<f64>,
) -> Result<PhaseDerivative, PhError> {
    mechanics_rhs(model, x, x, u)
}

/// Natural (power-conjugate) output `y = B(q)ᵀ M⁻¹(q) p`.
pub fn natural_output(model: &dyn MechanicalModel, x: &PhaseState) -> Result<DVector<f64>, PhError> {
    check_state(model, x)?;
    let m_inv = inverse_inertia(model, &x.q)?;
    Ok(model.input_matrix(&x.q).transpose() * (m_inv * &x.p))
}
