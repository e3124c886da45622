//! Virtual-joint-method model of one elastic serial chain.
//!
//! A chain is an ordered list of rigid transforms and one-dof joints. Joints
//! come in three classes: actuated (coordinates `rho`), passive (`q`, torque
//! free) and elastic virtual joints (`theta`, restoring force `K_theta *
//! theta`). The chain's forward geometry ends in the platform frame, so the
//! tip pose, Jacobians, reaction wrenches and stiffness matrices of a chain
//! all refer to the platform origin in base coordinates.

mod equilibrium;
mod ik;
mod kinematics;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::se3::{Pose, Se3Error, Wrench};

pub use equilibrium::{
    actuator_forces, cartesian_stiffness, cartesian_stiffness_linear, equilibrium_given_tip,
    equilibrium_given_tip_seeded, equilibrium_given_wrench, tangent_stiffness,
};
pub use ik::inverse_kinematics;
pub use kinematics::{forward_geometry, jacobians, ChainJacobians};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("invalid chain model: {0}")]
    InvalidModel(String),
    #[error("state dimensions (rho {rho}, q {q}, theta {theta}) do not match the chain")]
    DimensionMismatch { rho: usize, q: usize, theta: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("inverse kinematics stalled at a singular configuration (residual {residual:e})")]
    SingularConfiguration { residual: f64 },
    #[error("equilibrium system is singular (condition estimate {condition:e})")]
    SingularSystem { condition: f64 },
    #[error("tangent stiffness lost positive definiteness at load fraction {load_fraction}")]
    BucklingDetected { load_fraction: f64 },
    #[error(transparent)]
    Se3(#[from] Se3Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Prismatic,
    Revolute,
}

/// One-dof joint axis in the local frame of the preceding element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointAxis {
    pub axis: Vector3<f64>,
    pub joint: JointType,
}

impl JointAxis {
    pub fn prismatic(axis: Vector3<f64>) -> Self {
        Self {
            axis,
            joint: JointType::Prismatic,
        }
    }

    pub fn revolute(axis: Vector3<f64>) -> Self {
        Self {
            axis,
            joint: JointType::Revolute,
        }
    }
}

/// Lumped elastic joint: a sequence of one-dof deflection coordinates with a
/// symmetric positive definite stiffness matrix over them.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticJoint {
    dofs: Vec<JointAxis>,
    k_theta: DMatrix<f64>,
}

impl ElasticJoint {
    pub fn new(dofs: Vec<JointAxis>, k_theta: DMatrix<f64>) -> Result<Self, ChainError> {
        let n = dofs.len();
        if n == 0 || n > 6 {
            return Err(ChainError::InvalidModel(format!(
                "elastic joint must have 1..=6 dof, got {n}"
            )));
        }
        if k_theta.nrows() != n || k_theta.ncols() != n {
            return Err(ChainError::InvalidModel(format!(
                "elastic stiffness is {}x{}, expected {n}x{n}",
                k_theta.nrows(),
                k_theta.ncols()
            )));
        }
        let scale = k_theta.amax();
        if (&k_theta - k_theta.transpose()).amax() > 1e-12 * scale {
            return Err(ChainError::InvalidModel(
                "elastic stiffness is not symmetric".into(),
            ));
        }
        if scale == 0.0 || k_theta.clone().cholesky().is_none() {
            return Err(ChainError::InvalidModel(
                "elastic stiffness is not positive definite".into(),
            ));
        }
        Ok(Self { dofs, k_theta })
    }

    /// Six-dof spring: translations along x, y, z followed by rotations about
    /// x, y, z, with a diagonal stiffness.
    pub fn six_dof(translational: [f64; 3], rotational: [f64; 3]) -> Result<Self, ChainError> {
        let dofs = vec![
            JointAxis::prismatic(Vector3::x()),
            JointAxis::prismatic(Vector3::y()),
            JointAxis::prismatic(Vector3::z()),
            JointAxis::revolute(Vector3::x()),
            JointAxis::revolute(Vector3::y()),
            JointAxis::revolute(Vector3::z()),
        ];
        let diag = DVector::from_column_slice(&[
            translational[0],
            translational[1],
            translational[2],
            rotational[0],
            rotational[1],
            rotational[2],
        ]);
        Self::new(dofs, DMatrix::from_diagonal(&diag))
    }

    pub fn dofs(&self) -> &[JointAxis] {
        &self.dofs
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.k_theta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChainElement {
    Rigid(Pose),
    Actuated {
        axis: JointAxis,
        stroke: Option<(f64, f64)>,
    },
    Passive(JointAxis),
    Elastic(ElasticJoint),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum VarClass {
    Rho,
    Q,
    Theta,
}

/// A one-dof joint in chain order together with the coordinate it reads.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ElementaryJoint {
    pub axis: JointAxis,
    pub class: VarClass,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Step {
    Rigid(nalgebra::Isometry3<f64>),
    Joint(ElementaryJoint),
}

/// Immutable description of one elastic serial chain.
#[derive(Clone, Debug)]
pub struct ChainModel {
    elements: Vec<ChainElement>,
    end_offset: Pose,
    steps: Vec<Step>,
    strokes: Vec<Option<(f64, f64)>>,
    n_q: usize,
    n_theta: usize,
    k_theta: DMatrix<f64>,
    k_ref: f64,
}

impl ChainModel {
    pub fn new(elements: Vec<ChainElement>, end_offset: Pose) -> Result<Self, ChainError> {
        let mut steps = Vec::new();
        let mut strokes = Vec::new();
        let (mut n_q, mut n_theta) = (0, 0);
        let mut blocks = Vec::new();

        let check_axis = |a: &JointAxis| -> Result<(), ChainError> {
            if (a.axis.norm() - 1.0).abs() > 1e-12 {
                return Err(ChainError::InvalidModel(format!(
                    "joint axis {:?} is not a unit vector",
                    a.axis.as_slice()
                )));
            }
            Ok(())
        };

        for element in &elements {
            match element {
                ChainElement::Rigid(p) => steps.push(Step::Rigid(p.to_isometry())),
                ChainElement::Actuated { axis, stroke } => {
                    check_axis(axis)?;
                    if let Some((lo, hi)) = stroke {
                        if !(lo <= hi) {
                            return Err(ChainError::InvalidModel(format!(
                                "empty stroke [{lo}, {hi}]"
                            )));
                        }
                    }
                    steps.push(Step::Joint(ElementaryJoint {
                        axis: *axis,
                        class: VarClass::Rho,
                        index: strokes.len(),
                    }));
                    strokes.push(*stroke);
                }
                ChainElement::Passive(axis) => {
                    check_axis(axis)?;
                    steps.push(Step::Joint(ElementaryJoint {
                        axis: *axis,
                        class: VarClass::Q,
                        index: n_q,
                    }));
                    n_q += 1;
                }
                ChainElement::Elastic(e) => {
                    for axis in e.dofs() {
                        check_axis(axis)?;
                        steps.push(Step::Joint(ElementaryJoint {
                            axis: *axis,
                            class: VarClass::Theta,
                            index: n_theta,
                        }));
                        n_theta += 1;
                    }
                    blocks.push(e.stiffness().clone());
                }
            }
        }
        if strokes.is_empty() {
            return Err(ChainError::InvalidModel(
                "chain needs at least one actuated joint".into(),
            ));
        }
        if n_theta == 0 {
            return Err(ChainError::InvalidModel(
                "chain needs at least one elastic joint".into(),
            ));
        }

        let mut k_theta = DMatrix::zeros(n_theta, n_theta);
        let mut at = 0;
        for b in &blocks {
            let n = b.nrows();
            k_theta.view_mut((at, at), (n, n)).copy_from(b);
            at += n;
        }
        let k_ref = k_theta.amax();
        steps.push(Step::Rigid(end_offset.to_isometry()));

        Ok(Self {
            elements,
            end_offset,
            steps,
            strokes,
            n_q,
            n_theta,
            k_theta,
            k_ref,
        })
    }

    pub fn elements(&self) -> &[ChainElement] {
        &self.elements
    }

    pub fn end_offset(&self) -> &Pose {
        &self.end_offset
    }

    pub fn n_rho(&self) -> usize {
        self.strokes.len()
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    /// Block-diagonal stiffness over all elastic coordinates.
    pub fn k_theta(&self) -> &DMatrix<f64> {
        &self.k_theta
    }

    /// Largest entry of `K_theta`; the force scale of equilibrium residuals.
    pub fn stiffness_scale(&self) -> f64 {
        self.k_ref
    }

    pub fn strokes(&self) -> &[Option<(f64, f64)>] {
        &self.strokes
    }

    /// A copy of this chain with `mount` applied in front of every element.
    pub fn with_base_transform(&self, mount: &Pose) -> Self {
        let mut elements = Vec::with_capacity(self.elements.len() + 1);
        elements.push(ChainElement::Rigid(*mount));
        elements.extend(self.elements.iter().cloned());
        Self::new(elements, self.end_offset).expect("prepending a rigid transform keeps validity")
    }

    /// A copy with the rigid mounting in front of the first actuated joint
    /// rotated by `angle` about that joint's axis.
    pub fn with_actuator_mounting_error(&self, angle: f64) -> Self {
        let mut elements = Vec::with_capacity(self.elements.len() + 1);
        let mut inserted = false;
        for e in &self.elements {
            if !inserted {
                if let ChainElement::Actuated { axis, .. } = e {
                    elements.push(ChainElement::Rigid(Pose::from_axis_angle(&axis.axis, angle)));
                    inserted = true;
                }
            }
            elements.push(e.clone());
        }
        Self::new(elements, self.end_offset).expect("inserting a rigid transform keeps validity")
    }

    pub(crate) fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub(crate) fn check_state(&self, state: &ChainState) -> Result<(), ChainError> {
        if state.rho.len() != self.n_rho()
            || state.q.len() != self.n_q
            || state.theta.len() != self.n_theta
        {
            return Err(ChainError::DimensionMismatch {
                rho: state.rho.len(),
                q: state.q.len(),
                theta: state.theta.len(),
            });
        }
        Ok(())
    }
}

/// Joint coordinates of a chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub rho: DVector<f64>,
    pub q: DVector<f64>,
    pub theta: DVector<f64>,
}

impl ChainState {
    pub fn zeros(chain: &ChainModel) -> Self {
        Self {
            rho: DVector::zeros(chain.n_rho()),
            q: DVector::zeros(chain.n_q()),
            theta: DVector::zeros(chain.n_theta()),
        }
    }

    pub fn with_rho(mut self, rho: DVector<f64>) -> Self {
        self.rho = rho;
        self
    }

    pub fn unloaded(mut self) -> Self {
        self.theta.fill(0.0);
        self
    }

    pub(crate) fn value(&self, class: VarClass, index: usize) -> f64 {
        match class {
            VarClass::Rho => self.rho[index],
            VarClass::Q => self.q[index],
            VarClass::Theta => self.theta[index],
        }
    }
}

/// Converged static equilibrium of a chain.
#[derive(Clone, Debug)]
pub struct ChainEquilibrium {
    pub state: ChainState,
    pub tip_pose: Pose,
    /// Wrench the platform applies to the chain tip, about the platform origin.
    pub reaction: Wrench,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

/// Tolerances shared by the chain-level Newton solvers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Scaled residual tolerance (meters, rotations times `char_length`,
    /// forces divided by the chain stiffness scale).
    pub tol: f64,
    pub max_iter: usize,
    /// Length that converts rotations into meters in mixed norms.
    pub char_length: f64,
    /// Initial number of load-continuation steps.
    pub continuation_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100,
            char_length: 0.1,
            continuation_steps: 4,
        }
    }
}
