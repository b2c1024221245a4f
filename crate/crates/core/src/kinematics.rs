//! Serial revolute manipulators: rigid transforms, forward kinematics,
//! configuration sampling and randomized chain generation.
//!
//! A chain is an ordered list of joints. Each joint carries a fixed transform
//! from the previous joint's (rotated) frame and a unit rotation axis expressed
//! in its own frame. Forward kinematics composes `origin_i * rot(axis_i, q_i)`
//! for every joint and finally applies the end-effector transform.

use std::f64::consts::PI;
use std::ops::Mul;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("configuration has {got} angles but chain `{chain}` has {expected} joints")]
    DimensionMismatch {
        chain: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("invalid scale range ({0}, {1}): bounds must be positive and ordered")]
    InvalidScaleRange(f64, f64),
    #[error("failed to read robot description {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse robot description {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Proper rigid motion: rotation matrix plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation of `angle` radians about the unit `axis` through the origin.
    pub fn rotation_about(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self::new(
            Rotation3::from_axis_angle(axis, angle).into_inner(),
            Vector3::zeros(),
        )
    }

    /// URDF convention: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(translation: Vector3<f64>, rpy: [f64; 3]) -> Self {
        Self::new(
            Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]).into_inner(),
            translation,
        )
    }

    pub fn to_rpy(&self) -> [f64; 3] {
        let (r, p, y) = Rotation3::from_matrix_unchecked(self.rotation).euler_angles();
        [r, p, y]
    }

    /// Builds a transform from a position and a `(w, x, y, z)` quaternion.
    /// The quaternion is normalized; callers validate its norm beforehand.
    pub fn from_position_quaternion(position: [f64; 3], wxyz: [f64; 4]) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            wxyz[0], wxyz[1], wxyz[2], wxyz[3],
        ));
        Self::new(
            q.to_rotation_matrix().into_inner(),
            Vector3::new(position[0], position[1], position[2]),
        )
    }

    pub fn to_quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        [q.w, q.i, q.j, q.k]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Orthogonality and unit determinant within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

impl<'a> Mul<&'a RigidTransform> for &'a RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &'a RigidTransform) -> RigidTransform {
        *self * *rhs
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// SO(3) logarithm as a rotation vector (axis times angle).
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Geodesic angle between two rotations in radians.
///
/// Equal to `acos((tr(AᵀB) - 1) / 2)`, evaluated as an `atan2` of the sine
/// and (clamped) cosine so that angles near zero keep full precision.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    )
    .norm()
        / 2.0;
    sin.min(1.0).atan2(cos)
}

/// Position error in meters and rotation error in degrees.
pub fn pose_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let pos = (a.translation - b.translation).norm();
    let rot = rotation_angle_between(&a.rotation, &b.rotation).to_degrees();
    (pos, rot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    /// Fixed transform from the previous joint's rotated frame.
    pub origin: RigidTransform,
    pub axis: Unit<Vector3<f64>>,
    /// `(lower, upper)` in radians.
    pub limits: (f64, f64),
}

impl Joint {
    pub fn new(origin: RigidTransform, axis: Vector3<f64>) -> Self {
        Self {
            origin,
            axis: Unit::new_normalize(axis),
            limits: (-PI, PI),
        }
    }

    pub fn with_limits(mut self, lower: f64, upper: f64) -> Self {
        self.limits = (lower, upper);
        self
    }

    /// True when the limits cover a full turn, so angles may wrap.
    pub fn is_continuous(&self) -> bool {
        self.limits.1 - self.limits.0 >= 2.0 * PI - 1e-12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub name: String,
    pub joints: Vec<Joint>,
    /// Fixed transform from the last joint's rotated frame to the tool frame.
    pub end_effector: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DhParams {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl KinematicChain {
    pub fn new(
        name: impl Into<String>,
        joints: Vec<Joint>,
        end_effector: RigidTransform,
    ) -> Result<Self, KinematicsError> {
        let chain = Self {
            name: name.into(),
            joints,
            end_effector,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Converts standard Denavit-Hartenberg rows
    /// (`Rz(θ) Tz(d) Tx(a) Rx(α)` per joint) into the axis-list model.
    pub fn from_dh(name: impl Into<String>, rows: &[DhParams]) -> Result<Self, KinematicsError> {
        let z = Vector3::z();
        let z_axis = Unit::new_normalize(z);
        let link = |row: &DhParams| {
            RigidTransform::from_translation(Vector3::new(0.0, 0.0, row.d))
                * RigidTransform::from_translation(Vector3::new(row.a, 0.0, 0.0))
                * RigidTransform::rotation_about(&Unit::new_normalize(Vector3::x()), row.alpha)
        };
        let mut joints = Vec::with_capacity(rows.len());
        let mut carry = RigidTransform::identity();
        for row in rows {
            let origin = carry * RigidTransform::rotation_about(&z_axis, row.theta_offset);
            joints.push(Joint::new(origin, z));
            carry = link(row);
        }
        Self::new(name, joints, carry)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.joints.is_empty() {
            return Err(KinematicsError::InvalidChain(format!(
                "chain `{}` has no joints",
                self.name
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-12 {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {i} axis is not unit length"
                )));
            }
            let (lo, hi) = j.limits;
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {i} limits ({lo}, {hi}) are not an ordered interval"
                )));
            }
            if !j.origin.is_valid(1e-9) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {i} origin is not a proper rigid transform"
                )));
            }
        }
        if !self.end_effector.is_valid(1e-9) {
            return Err(KinematicsError::InvalidChain(
                "end-effector transform is not a proper rigid transform".into(),
            ));
        }
        Ok(())
    }

    pub fn check_dim(&self, q: &Configuration) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                chain: self.name.clone(),
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Cumulative transforms: one per joint (after its rotation) followed by
    /// the end-effector pose.
    pub fn forward_kinematics(
        &self,
        q: &Configuration,
    ) -> Result<Vec<RigidTransform>, KinematicsError> {
        self.check_dim(q)?;
        let mut out = Vec::with_capacity(self.dof() + 1);
        let mut t = RigidTransform::identity();
        for (joint, &angle) in self.joints.iter().zip(q.angles()) {
            t = t * joint.origin * RigidTransform::rotation_about(&joint.axis, angle);
            out.push(t);
        }
        out.push(t * self.end_effector);
        Ok(out)
    }

    pub fn end_effector_pose(&self, q: &Configuration) -> Result<RigidTransform, KinematicsError> {
        Ok(*self
            .forward_kinematics(q)?
            .last()
            .expect("forward kinematics always yields the end effector"))
    }

    /// Geometric Jacobian (rows: linear velocity, then angular velocity) of
    /// the end-effector frame, expressed in the base frame.
    pub fn jacobian(&self, q: &Configuration) -> Result<nalgebra::DMatrix<f64>, KinematicsError> {
        self.check_dim(q)?;
        let frames = self.forward_kinematics(q)?;
        let p_ee = frames[self.dof()].translation;
        let mut jac = nalgebra::DMatrix::zeros(6, self.dof());
        for (i, joint) in self.joints.iter().enumerate() {
            // The axis passes through the joint frame origin, which the
            // joint's own rotation leaves fixed.
            let w = frames[i].rotation * joint.axis.into_inner();
            let p = frames[i].translation;
            let lin = w.cross(&(p_ee - p));
            for k in 0..3 {
                jac[(k, i)] = lin[k];
                jac[(k + 3, i)] = w[k];
            }
        }
        Ok(jac)
    }

    /// Upper bound on the distance from the first joint to the end
    /// effector: the sum of all downstream link offsets.
    pub fn reach(&self) -> f64 {
        self.joints
            .iter()
            .skip(1)
            .map(|j| j.origin.translation.norm())
            .sum::<f64>()
            + self.end_effector.translation.norm()
    }

    /// Angle-space limit clamp; full-turn joints wrap instead.
    pub fn project_to_limits(&self, q: &mut Configuration) {
        for (a, j) in q.0.iter_mut().zip(&self.joints) {
            if j.is_continuous() {
                *a = wrap_angle(*a);
            } else {
                *a = a.clamp(j.limits.0, j.limits.1);
            }
        }
    }

    pub fn sample_configuration_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        Configuration(
            self.joints
                .iter()
                .map(|j| {
                    let (lo, hi) = j.limits;
                    if hi > lo {
                        rng.gen_range(lo..hi)
                    } else {
                        lo
                    }
                })
                .collect(),
        )
    }

    pub fn sample_configuration(&self, seed: u64) -> Configuration {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_configuration_with(&mut rng)
    }

    pub fn from_json_str(s: &str) -> Result<Self, KinematicsError> {
        let desc: RobotDescription =
            serde_json::from_str(s).map_err(|source| KinematicsError::Parse {
                path: "<inline>".into(),
                source,
            })?;
        desc.into_chain()
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path).map_err(|source| KinematicsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let desc: RobotDescription =
            serde_json::from_str(&text).map_err(|source| KinematicsError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        desc.into_chain()
    }

    pub fn to_description(&self) -> RobotDescription {
        RobotDescription {
            name: self.name.clone(),
            joints: self
                .joints
                .iter()
                .map(|j| JointDescription {
                    translation: j.origin.translation.into(),
                    rotation_rpy: j.origin.to_rpy(),
                    axis: j.axis.into_inner().into(),
                    limits: [j.limits.0, j.limits.1],
                })
                .collect(),
            end_effector: Some(FrameDescription {
                translation: self.end_effector.translation.into(),
                rotation_rpy: self.end_effector.to_rpy(),
            }),
        }
    }
}

/// Joint angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn wrapped(&self) -> Self {
        Self(self.0.iter().map(|&a| wrap_angle(a)).collect())
    }

    /// Largest absolute wrapped difference between two configurations.
    pub fn max_wrapped_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| wrap_angle(a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for Configuration {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Scales every link translation (joint origins after the first, and the
/// end-effector offset) by an independent uniform factor drawn from
/// `scale_range`. Axes, rotations and joint count are preserved.
pub fn random_chain(
    template: &KinematicChain,
    scale_range: (f64, f64),
    seed: u64,
) -> Result<KinematicChain, KinematicsError> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && hi > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(KinematicsError::InvalidScaleRange(lo, hi));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let mut chain = template.clone();
    for joint in chain.joints.iter_mut() {
        joint.origin.translation *= draw();
    }
    chain.end_effector.translation *= draw();
    chain.name = format!("{}-rand{seed}", template.name);
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDescription {
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation_rpy: [f64; 3],
    pub axis: [f64; 3],
    #[serde(default = "default_limits")]
    pub limits: [f64; 2],
}

fn default_limits() -> [f64; 2] {
    [-PI, PI]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDescription {
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation_rpy: [f64; 3],
}

/// On-disk robot description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotDescription {
    pub name: String,
    pub joints: Vec<JointDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_effector: Option<FrameDescription>,
}

impl RobotDescription {
    pub fn into_chain(self) -> Result<KinematicChain, KinematicsError> {
        let mut joints = Vec::with_capacity(self.joints.len());
        for (i, j) in self.joints.iter().enumerate() {
            let axis = Vector3::from(j.axis);
            let n = axis.norm();
            if !(n > 1e-9) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joints[{i}].axis has zero length"
                )));
            }
            let origin = RigidTransform::from_rpy(Vector3::from(j.translation), j.rotation_rpy);
            joints.push(Joint::new(origin, axis).with_limits(j.limits[0], j.limits[1]));
        }
        let ee = self
            .end_effector
            .map(|f| RigidTransform::from_rpy(Vector3::from(f.translation), f.rotation_rpy))
            .unwrap_or_default();
        KinematicChain::new(self.name, joints, ee)
    }
}

/// Robot descriptions shipped with the crate.
pub mod robots {
    use super::KinematicChain;

    const BUNDLED: &[(&str, &str)] = &[
        ("kuka", include_str!("../robots/kuka.json")),
        ("lwa4d", include_str!("../robots/lwa4d.json")),
        ("lwa4p", include_str!("../robots/lwa4p.json")),
        ("panda", include_str!("../robots/panda.json")),
        ("ur10", include_str!("../robots/ur10.json")),
        ("planar2", include_str!("../robots/planar2.json")),
        ("planar3", include_str!("../robots/planar3.json")),
        ("toy4", include_str!("../robots/toy4.json")),
        ("toy6", include_str!("../robots/toy6.json")),
    ];

    pub fn names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn json(name: &str) -> Option<&'static str> {
        BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, j)| *j)
    }

    pub fn load(name: &str) -> Option<KinematicChain> {
        json(name).map(|j| KinematicChain::from_json_str(j).expect("bundled robot parses"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::*;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    fn planar2() -> KinematicChain {
        robots::load("planar2").unwrap()
    }

    #[test]
    fn planar_zero_configuration() {
        let ee = planar2()
            .end_effector_pose(&Configuration(vec![0.0, 0.0]))
            .unwrap();
        assert!((ee.translation - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((ee.rotation - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn planar_quarter_turn() {
        let ee = planar2()
            .end_effector_pose(&Configuration(vec![PI / 2.0, 0.0]))
            .unwrap();
        assert!((ee.translation - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), PI / 2.0).into_inner();
        assert!((ee.rotation - expected).abs().max() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let err = planar2()
            .forward_kinematics(&Configuration(vec![0.0]))
            .unwrap_err();
        assert!(matches!(
            err,
            KinematicsError::DimensionMismatch {
                expected: 2,
                got: 1,
                ..
            }
        ));
    }

    #[test]
    fn degenerate_limits_sample_exactly() {
        let mut chain = planar2();
        for j in chain.joints.iter_mut() {
            j.limits = (0.25, 0.25);
        }
        let q = chain.sample_configuration(7);
        assert!(q.angles().iter().all(|&a| a == 0.25));
    }

    #[test]
    fn sampling_is_deterministic() {
        let chain = robots::load("kuka").unwrap();
        assert_eq!(chain.sample_configuration(42), chain.sample_configuration(42));
        assert_ne!(chain.sample_configuration(42), chain.sample_configuration(43));
    }

    #[test]
    fn pose_error_cases() {
        let a = RigidTransform::identity();
        assert_eq!(pose_error(&a, &a), (0.0, 0.0));
        let b = RigidTransform::from_translation(Vector3::new(0.003, 0.004, 0.0));
        assert!(close(pose_error(&a, &b).0, 0.005, 1e-15));
    }

    #[test]
    fn wrap_angle_range() {
        assert!(close(wrap_angle(3.0 * PI), PI, 1e-12));
        assert!(close(wrap_angle(-PI), PI, 1e-12));
        assert!(close(wrap_angle(0.5), 0.5, 0.0));
    }

    #[test]
    fn random_chain_rejects_bad_ranges() {
        let t = planar2();
        assert!(random_chain(&t, (0.0, 1.0), 1).is_err());
        assert!(random_chain(&t, (1.2, 1.0), 1).is_err());
        assert!(random_chain(&t, (-1.0, 1.0), 1).is_err());
    }

    #[test]
    fn random_chain_identity_scaling() {
        let t = robots::load("ur10").unwrap();
        let c = random_chain(&t, (1.0, 1.0), 3).unwrap();
        assert_eq!(c.joints, t.joints);
        assert_eq!(c.end_effector, t.end_effector);
    }

    #[test]
    fn description_round_trip() {
        let t = robots::load("panda").unwrap();
        let back = t.to_description().into_chain().unwrap();
        for (a, b) in t.joints.iter().zip(&back.joints) {
            assert!((a.origin.rotation - b.origin.rotation).abs().max() < 1e-12);
            assert!((a.origin.translation - b.origin.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn unit_axis_required_on_parse() {
        let bad = r#"{"name":"x","joints":[{"translation":[0,0,0],"axis":[0,0,0]}]}"#;
        assert!(KinematicChain::from_json_str(bad).is_err());
    }

    #[test]
    fn bundled_robots_parse() {
        for name in robots::names() {
            let c = robots::load(name).unwrap();
            c.validate().unwrap();
        }
    }
}
