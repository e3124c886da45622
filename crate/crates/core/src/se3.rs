//! Rigid-body poses, small displacements (twists) and wrenches.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Twist`] is `(dp, dphi)`: the displacement of a frame origin and a
//!   small rotation, both expressed in the base frame. Rotations act on the
//!   left, `R' = exp(dphi) * R`.
//! * A [`Wrench`] is `(force, moment)` with the moment taken about the same
//!   point whose displacement the paired twist describes, so that
//!   `w · t = force · dp + moment · dphi` is virtual work.
//! * Units are SI everywhere: meters, radians, newtons, newton-meters.

use std::f64::consts::PI;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Isometry3, Matrix3, Matrix6, Translation3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Largest rotation a [`pose_delta`] may bridge.
pub const MAX_DELTA_ROTATION: f64 = PI / 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Se3Error {
    #[error("rotation vector magnitude {0} is not below pi")]
    NonCanonical(f64),
    #[error("rotation difference {0} rad is outside the small-displacement branch")]
    BranchError(f64),
}

/// Position and orientation of a frame. The orientation is a rotation vector
/// (axis times angle) with magnitude strictly below pi.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    position: Vector3<f64>,
    orientation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.position;
        let r = &self.orientation;
        write!(
            f,
            "Pose(p: [{:.6}, {:.6}, {:.6}] m, r: [{:.6}, {:.6}, {:.6}] rad)",
            p.x, p.y, p.z, r.x, r.y, r.z
        )
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: Vector3::zeros(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: Vector3<f64>) -> Result<Self, Se3Error> {
        let angle = orientation.norm();
        if !(angle < PI) {
            return Err(Se3Error::NonCanonical(angle));
        }
        Ok(Self {
            position,
            orientation,
        })
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_position(Vector3::new(x, y, z))
    }

    /// Pure rotation about `axis` (need not be normalized) by `angle` radians.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        Self::from_isometry(&Isometry3::from_parts(Translation3::identity(), q))
    }

    /// Converts from an isometry, mapping the rotation onto the canonical branch.
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: iso.rotation.scaled_axis(),
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.position),
            UnitQuaternion::from_scaled_axis(self.orientation),
        )
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn orientation(&self) -> &Vector3<f64> {
        &self.orientation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        UnitQuaternion::from_scaled_axis(self.orientation)
            .to_rotation_matrix()
            .into_inner()
    }

    pub fn with_position(mut self, position: Vector3<f64>) -> Self {
        self.position = position;
        self
    }

    /// `self * other` as rigid transforms.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        Pose::from_isometry(&self.to_isometry().inverse())
    }

    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.to_isometry().transform_point(&(*point).into()).coords
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::from_isometry(&(a.to_isometry() * b.to_isometry()))
}

/// Displaces `pose` by `d`: the origin moves by `d.dp`, the orientation is
/// pre-multiplied by `exp(d.dphi)`.
pub fn apply_twist(pose: &Pose, d: &Twist) -> Result<Pose, Se3Error> {
    if d.dphi == Vector3::zeros() {
        return Ok(Pose {
            position: pose.position + d.dp,
            orientation: pose.orientation,
        });
    }
    let rot = UnitQuaternion::from_scaled_axis(d.dphi)
        * UnitQuaternion::from_scaled_axis(pose.orientation);
    // both factors have non-negative scalar part; a negative product means
    // the composed rotation went past pi
    if rot.w < 0.0 {
        return Err(Se3Error::NonCanonical(2.0 * PI - rot.angle()));
    }
    let orientation = rot.scaled_axis();
    let angle = orientation.norm();
    if angle >= PI - 1e-9 {
        return Err(Se3Error::NonCanonical(angle));
    }
    Ok(Pose {
        position: pose.position + d.dp,
        orientation,
    })
}

/// The twist `d` such that `apply_twist(from, d) == to`.
pub fn pose_delta(from: &Pose, to: &Pose) -> Result<Twist, Se3Error> {
    let dp = to.position - from.position;
    if from.orientation == to.orientation {
        return Ok(Twist::new(dp, Vector3::zeros()));
    }
    let dq = UnitQuaternion::from_scaled_axis(to.orientation)
        * UnitQuaternion::from_scaled_axis(from.orientation).inverse();
    let dphi = dq.scaled_axis();
    let angle = dphi.norm();
    if angle >= MAX_DELTA_ROTATION {
        return Err(Se3Error::BranchError(angle));
    }
    Ok(Twist::new(dp, dphi))
}

/// Moves the reference point of a wrench: the force is unchanged and the
/// moment picks up `(from_point - to_point) x force`.
pub fn transport_wrench(w: &Wrench, from_point: &Vector3<f64>, to_point: &Vector3<f64>) -> Wrench {
    Wrench {
        force: w.force,
        moment: w.moment + (from_point - to_point).cross(&w.force),
    }
}

/// Small displacement of a frame in base coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Twist {
    pub dp: Vector3<f64>,
    pub dphi: Vector3<f64>,
}

impl Twist {
    pub fn new(dp: Vector3<f64>, dphi: Vector3<f64>) -> Self {
        Self { dp, dphi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.dp);
        v.fixed_rows_mut::<3>(3).copy_from(&self.dphi);
        v
    }

    /// Euclidean norm with the rotational part multiplied by `char_length`.
    pub fn scaled_norm(&self, char_length: f64) -> f64 {
        (self.dp.norm_squared() + char_length * char_length * self.dphi.norm_squared()).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.dp == Vector3::zeros() && self.dphi == Vector3::zeros()
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.dp + rhs.dp, self.dphi + rhs.dphi)
    }
}

impl Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist::new(self.dp - rhs.dp, self.dphi - rhs.dphi)
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.dp, -self.dphi)
    }
}

impl Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist::new(self.dp * s, self.dphi * s)
    }
}

/// Force and moment about a reference point, base coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, moment: Vector3<f64>) -> Self {
        Self { force, moment }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_force(force: Vector3<f64>) -> Self {
        Self::new(force, Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.force);
        v.fixed_rows_mut::<3>(3).copy_from(&self.moment);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_zero(&self) -> bool {
        self.force == Vector3::zeros() && self.moment == Vector3::zeros()
    }
}

impl Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.force + rhs.force, self.moment + rhs.moment)
    }
}

impl AddAssign for Wrench {
    fn add_assign(&mut self, rhs: Wrench) {
        self.force += rhs.force;
        self.moment += rhs.moment;
    }
}

impl Sub for Wrench {
    type Output = Wrench;
    fn sub(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.force - rhs.force, self.moment - rhs.moment)
    }
}

impl Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        Wrench::new(-self.force, -self.moment)
    }
}

impl Mul<f64> for Wrench {
    type Output = Wrench;
    fn mul(self, s: f64) -> Wrench {
        Wrench::new(self.force * s, self.moment * s)
    }
}

impl Sum for Wrench {
    fn sum<I: Iterator<Item = Wrench>>(iter: I) -> Wrench {
        iter.fold(Wrench::zero(), |acc, w| acc + w)
    }
}

/// 6x6 map from a [`Twist`] of the reference frame to the [`Wrench`] that
/// produces it. Block units: N/m, N/rad, N·m/m, N·m/rad.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StiffnessMatrix(pub Matrix6<f64>);

impl StiffnessMatrix {
    pub fn zeros() -> Self {
        Self(Matrix6::zeros())
    }

    pub fn from_diagonal(translational: [f64; 3], rotational: [f64; 3]) -> Self {
        let d = Vector6::new(
            translational[0],
            translational[1],
            translational[2],
            rotational[0],
            rotational[1],
            rotational[2],
        );
        Self(Matrix6::from_diagonal(&d))
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn apply(&self, t: &Twist) -> Wrench {
        Wrench::from_vector(&(self.0 * t.to_vector()))
    }

    /// Compliance solve `K^-1 w`; `None` when the matrix is singular.
    pub fn solve(&self, w: &Wrench) -> Option<Twist> {
        self.0.lu().solve(&w.to_vector()).map(|v| Twist::from_vector(&v))
    }

    pub fn symmetric_part(&self) -> Self {
        Self((self.0 + self.0.transpose()) * 0.5)
    }

    /// `|K - K^T|_F / |K|_F`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.0.norm();
        if n == 0.0 {
            return 0.0;
        }
        (self.0 - self.0.transpose()).norm() / n
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.symmetric_part().0.cholesky().is_some()
    }

    pub fn eigenvalues(&self) -> Vector6<f64> {
        self.symmetric_part().0.symmetric_eigenvalues()
    }

    /// Ratio of extreme singular values; infinite when singular.
    pub fn condition_number(&self) -> f64 {
        let sv = self.0.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

impl Add for StiffnessMatrix {
    type Output = StiffnessMatrix;
    fn add(self, rhs: StiffnessMatrix) -> StiffnessMatrix {
        StiffnessMatrix(self.0 + rhs.0)
    }
}

impl Sum for StiffnessMatrix {
    fn sum<I: Iterator<Item = StiffnessMatrix>>(iter: I) -> StiffnessMatrix {
        iter.fold(StiffnessMatrix::zeros(), |acc, k| acc + k)
    }
}
