use nalgebra::{DMatrix, Isometry3, Translation3, UnitQuaternion, Vector3, Vector6};

use super::{ChainError, ChainModel, ChainState, ElementaryJoint, JointAxis, JointType, Step, VarClass};
use crate::se3::{Pose, Wrench};

/// Tip Jacobians split by coordinate class. Column `j` is the twist of the
/// platform origin (base coordinates) per unit rate of that coordinate.
#[derive(Clone, Debug)]
pub struct ChainJacobians {
    pub rho: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub theta: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct JointFrame {
    pub joint: ElementaryJoint,
    pub axis: Vector3<f64>,
    pub origin: Vector3<f64>,
}

impl JointFrame {
    /// Screw of the joint as the velocity of the base origin: `(v, w)`.
    fn spatial(&self) -> (Vector3<f64>, Vector3<f64>) {
        match self.joint.axis.joint {
            JointType::Prismatic => (self.axis, Vector3::zeros()),
            JointType::Revolute => (self.origin.cross(&self.axis), self.axis),
        }
    }

    fn tip_column(&self, tip: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        match self.joint.axis.joint {
            JointType::Prismatic => (self.axis, Vector3::zeros()),
            JointType::Revolute => (self.axis.cross(&(tip - self.origin)), self.axis),
        }
    }
}

/// Forward kinematics of a chain with every joint frame recorded.
#[derive(Clone, Debug)]
pub(crate) struct Kinematics {
    pub tip: Isometry3<f64>,
    pub frames: Vec<JointFrame>,
}

fn elementary(axis: &JointAxis, value: f64) -> Isometry3<f64> {
    match axis.joint {
        JointType::Prismatic => {
            Isometry3::from_parts(Translation3::from(axis.axis * value), UnitQuaternion::identity())
        }
        JointType::Revolute => Isometry3::from_parts(
            Translation3::identity(),
            UnitQuaternion::from_scaled_axis(axis.axis * value),
        ),
    }
}

pub(crate) fn evaluate(chain: &ChainModel, state: &ChainState) -> Kinematics {
    let mut t = Isometry3::identity();
    let mut frames = Vec::new();
    for step in chain.steps() {
        match step {
            Step::Rigid(iso) => t *= iso,
            Step::Joint(j) => {
                frames.push(JointFrame {
                    joint: *j,
                    axis: t.rotation * j.axis.axis,
                    origin: t.translation.vector,
                });
                t *= elementary(&j.axis, state.value(j.class, j.index));
            }
        }
    }
    Kinematics { tip: t, frames }
}

impl Kinematics {
    pub fn tip_pose(&self) -> Pose {
        Pose::from_isometry(&self.tip)
    }

    fn column(&self, k: usize) -> Vector6<f64> {
        let (v, w) = self.frames[k].tip_column(&self.tip.translation.vector);
        Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    /// Jacobian columns of one coordinate class, in coordinate order.
    pub fn jacobian(&self, class: VarClass, n: usize) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(6, n);
        for (k, f) in self.frames.iter().enumerate() {
            if f.joint.class == class {
                j.set_column(f.joint.index, &self.column(k));
            }
        }
        j
    }

    pub fn jacobians(&self, chain: &ChainModel) -> ChainJacobians {
        ChainJacobians {
            rho: self.jacobian(VarClass::Rho, chain.n_rho()),
            q: self.jacobian(VarClass::Q, chain.n_q()),
            theta: self.jacobian(VarClass::Theta, chain.n_theta()),
        }
    }

    /// Derivative of the generalized joint loads `J^T w` (tip wrench `w`
    /// held fixed) with respect to the coordinates, restricted to the
    /// requested row and column classes.
    pub fn load_hessian(
        &self,
        w: &Wrench,
        rows: (VarClass, usize),
        cols: (VarClass, usize),
    ) -> DMatrix<f64> {
        let tip = self.tip.translation.vector;
        let f = w.force;
        let moment_at_origin = w.moment + tip.cross(&f);
        let mut h = DMatrix::zeros(rows.1, cols.1);
        for (j, fj) in self.frames.iter().enumerate() {
            if fj.joint.class != rows.0 {
                continue;
            }
            let (vj, wj) = fj.spatial();
            for (k, fk) in self.frames.iter().enumerate() {
                if fk.joint.class != cols.0 {
                    continue;
                }
                let (tip_vk, _) = fk.tip_column(&tip);
                // the tip point moves, so the lever arm of f changes
                let mut value = wj.dot(&tip_vk.cross(&f));
                if k < j {
                    // joint j's screw is carried along by joint k
                    let (vk, wk) = fk.spatial();
                    let bv = wk.cross(&vj) - wj.cross(&vk);
                    let bw = wk.cross(&wj);
                    value += bv.dot(&f) + bw.dot(&moment_at_origin);
                }
                h[(fj.joint.index, fk.joint.index)] = value;
            }
        }
        h
    }
}

pub fn forward_geometry(chain: &ChainModel, state: &ChainState) -> Result<Pose, ChainError> {
    chain.check_state(state)?;
    Ok(evaluate(chain, state).tip_pose())
}

pub fn jacobians(chain: &ChainModel, state: &ChainState) -> Result<ChainJacobians, ChainError> {
    chain.check_state(state)?;
    Ok(evaluate(chain, state).jacobians(chain))
}
