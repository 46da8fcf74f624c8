//! Forward and inverse kinematics of a 7-revolute-joint serial arm carrying a rigid
//! camera shaft along the flange z-axis.
//!
//! The default geometry follows the usual lightweight-arm layout: joint axes alternate
//! between the local z and y axes (z, y, z, -y, z, y, z) and the link offsets are all
//! measured along the local z-axis in the zero configuration, so that the zero pose
//! points the arm straight up.

use nalgebra::{Isometry3, SMatrix, SVector, Translation3, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Number of actuated joints.
pub const DOF: usize = 7;

pub type Jacobian<T> = SMatrix<T, 6, DOF>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("non-finite input")]
    NonFinite,
    #[error("inverse kinematics did not converge after {iterations} iterations (position error {position_error} mm, orientation error {orientation_error} rad)")]
    NotConverged {
        iterations: usize,
        position_error: f64,
        orientation_error: f64,
    },
    #[error("no joint-limit feasible solution (joint {joint} pinned at its limit)")]
    OutOfLimits { joint: usize },
    #[error("invalid arm model: {0}")]
    InvalidModel(String),
}

/// Joint configuration in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointVector<T: Real>(pub SVector<T, DOF>);

impl<T: Real> JointVector<T> {
    pub fn zeros() -> Self {
        Self(SVector::zeros())
    }

    pub fn from_array(q: [T; DOF]) -> Self {
        Self(SVector::from(q))
    }

    pub fn from_degrees(deg: [f64; DOF]) -> Self {
        Self(SVector::from_fn(|i, _| T::lit(deg[i].to_radians())))
    }

    pub fn to_array(&self) -> [T; DOF] {
        self.0.into()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.finite())
    }

    /// Largest absolute per-joint difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        (self.0 - other.0).amax()
    }
}

/// Inclusive joint interval in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLimit<T: Real> {
    pub min: T,
    pub max: T,
}

impl<T: Real> JointLimit<T> {
    pub fn contains(&self, v: T) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clamp(&self, v: T) -> T {
        v.clamp(self.min, self.max)
    }

    pub fn mid(&self) -> T {
        (self.min + self.max) * T::lit(0.5)
    }
}

/// Position in mm plus unit-quaternion orientation, expressed in the robot base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T: Real> {
    pub position: Vector3<T>,
    pub orientation: UnitQuaternion<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(position: Vector3<T>, orientation: UnitQuaternion<T>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn to_isometry(&self) -> Isometry3<T> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<T>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }

    /// Direction of the local z-axis, i.e. the camera shaft direction for a flange or tip pose.
    pub fn z_axis(&self) -> Vector3<T> {
        self.orientation * Vector3::z()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.finite())
            && self.orientation.coords.iter().all(|v| v.finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointSpec<T: Real> {
    /// Offset from the previous joint frame (or the base) to this joint, in the previous frame.
    pub origin: Vector3<T>,
    /// Rotation axis in the joint's own frame.
    pub axis: Unit<Vector3<T>>,
}

/// Link lengths in mm: base to shoulder, shoulder to elbow, elbow to wrist, wrist to flange.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkOffsets<T: Real> {
    pub base_shoulder: T,
    pub shoulder_elbow: T,
    pub elbow_wrist: T,
    pub wrist_flange: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmModel<T: Real> {
    pub joints: [JointSpec<T>; DOF],
    pub link_offsets: LinkOffsets<T>,
    pub joint_limits: [JointLimit<T>; DOF],
    /// Camera length beyond the flange, along the flange z-axis (mm).
    pub tool_offset: T,
}

/// On-disk arm description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmDescription {
    pub link_offsets_mm: [f64; 4],
    pub joint_limits_deg: [[f64; 2]; DOF],
    pub tool_offset_mm: f64,
}

impl Default for ArmDescription {
    fn default() -> Self {
        Self {
            link_offsets_mm: [360.0, 420.0, 400.0, 126.0],
            joint_limits_deg: [
                [-170.0, 170.0],
                [-120.0, 120.0],
                [-170.0, 170.0],
                [-120.0, 120.0],
                [-170.0, 170.0],
                [-120.0, 120.0],
                [-175.0, 175.0],
            ],
            tool_offset_mm: 300.0,
        }
    }
}

impl ArmDescription {
    pub fn to_model<T: Real>(&self) -> Result<ArmModel<T>, KinematicsError> {
        let [a, b, c, d] = self.link_offsets_mm;
        let offsets = LinkOffsets {
            base_shoulder: T::lit(a),
            shoulder_elbow: T::lit(b),
            elbow_wrist: T::lit(c),
            wrist_flange: T::lit(d),
        };
        let limits = self.joint_limits_deg.map(|[lo, hi]| JointLimit {
            min: T::lit(lo.to_radians()),
            max: T::lit(hi.to_radians()),
        });
        ArmModel::new(offsets, limits, T::lit(self.tool_offset_mm))
    }

    pub fn from_model<T: Real>(model: &ArmModel<T>) -> Self {
        let o = &model.link_offsets;
        Self {
            link_offsets_mm: [
                o.base_shoulder.as_f64(),
                o.shoulder_elbow.as_f64(),
                o.elbow_wrist.as_f64(),
                o.wrist_flange.as_f64(),
            ],
            joint_limits_deg: model
                .joint_limits
                .map(|l| [l.min.as_f64().to_degrees(), l.max.as_f64().to_degrees()]),
            tool_offset_mm: model.tool_offset.as_f64(),
        }
    }
}

/// Flange and camera-tip poses of one configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardKinematics<T: Real> {
    pub flange: Pose<T>,
    pub tip: Pose<T>,
}

struct Chain<T: Real> {
    joint_positions: [Vector3<T>; DOF],
    joint_axes: [Vector3<T>; DOF],
    flange: Isometry3<T>,
    tip: Isometry3<T>,
}

impl<T: Real> ArmModel<T> {
    pub fn new(
        link_offsets: LinkOffsets<T>,
        joint_limits: [JointLimit<T>; DOF],
        tool_offset: T,
    ) -> Result<Self, KinematicsError> {
        let lens = [
            link_offsets.base_shoulder,
            link_offsets.shoulder_elbow,
            link_offsets.elbow_wrist,
            link_offsets.wrist_flange,
        ];
        if lens.iter().any(|l| !l.finite() || *l <= T::zero()) {
            return Err(KinematicsError::InvalidModel(
                "link offsets must be finite and positive".into(),
            ));
        }
        for (i, l) in joint_limits.iter().enumerate() {
            if !(l.min.finite() && l.max.finite()) || l.min >= l.max {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {} limits must satisfy min < max",
                    i + 1
                )));
            }
        }
        if !tool_offset.finite() || tool_offset < T::zero() {
            return Err(KinematicsError::InvalidModel(
                "tool offset must be finite and non-negative".into(),
            ));
        }

        let z = Vector3::z_axis();
        let y = Vector3::y_axis();
        let neg_y = -Vector3::y_axis();
        let up = |d: T| Vector3::new(T::zero(), T::zero(), d);
        let zero = T::zero();
        let joints = [
            JointSpec {
                origin: up(zero),
                axis: z,
            },
            JointSpec {
                origin: up(link_offsets.base_shoulder),
                axis: y,
            },
            JointSpec {
                origin: up(zero),
                axis: z,
            },
            JointSpec {
                origin: up(link_offsets.shoulder_elbow),
                axis: neg_y,
            },
            JointSpec {
                origin: up(zero),
                axis: z,
            },
            JointSpec {
                origin: up(link_offsets.elbow_wrist),
                axis: y,
            },
            JointSpec {
                origin: up(zero),
                axis: z,
            },
        ];
        Ok(Self {
            joints,
            link_offsets,
            joint_limits,
            tool_offset,
        })
    }

    pub fn within_limits(&self, q: &JointVector<T>) -> bool {
        q.0.iter()
            .zip(self.joint_limits.iter())
            .all(|(v, l)| l.contains(*v))
    }

    pub fn clamp_to_limits(&self, q: &JointVector<T>) -> JointVector<T> {
        JointVector(SVector::from_fn(|i, _| self.joint_limits[i].clamp(q.0[i])))
    }

    pub fn limit_midpoints(&self) -> JointVector<T> {
        JointVector(SVector::from_fn(|i, _| self.joint_limits[i].mid()))
    }

    fn chain(&self, q: &JointVector<T>) -> Chain<T> {
        let mut frame = Isometry3::identity();
        let mut joint_positions = [Vector3::zeros(); DOF];
        let mut joint_axes = [Vector3::zeros(); DOF];
        for (i, joint) in self.joints.iter().enumerate() {
            frame *= Translation3::from(joint.origin);
            joint_positions[i] = frame.translation.vector;
            joint_axes[i] = frame.rotation * joint.axis.into_inner();
            frame *= UnitQuaternion::from_axis_angle(&joint.axis, q.0[i]);
        }
        let flange =
            frame * Translation3::new(T::zero(), T::zero(), self.link_offsets.wrist_flange);
        let tip = flange * Translation3::new(T::zero(), T::zero(), self.tool_offset);
        Chain {
            joint_positions,
            joint_axes,
            flange,
            tip,
        }
    }

    pub fn forward_kinematics(
        &self,
        q: &JointVector<T>,
    ) -> Result<ForwardKinematics<T>, KinematicsError> {
        if !q.is_finite() {
            return Err(KinematicsError::NonFinite);
        }
        let chain = self.chain(q);
        Ok(ForwardKinematics {
            flange: Pose::from_isometry(&chain.flange),
            tip: Pose::from_isometry(&chain.tip),
        })
    }

    /// Camera-tip pose only.
    pub fn tip_pose(&self, q: &JointVector<T>) -> Result<Pose<T>, KinematicsError> {
        Ok(self.forward_kinematics(q)?.tip)
    }

    /// Geometric Jacobian of the camera tip in the base frame. Column `i` is
    /// `(z_i x (p_tip - p_i), z_i)`.
    pub fn jacobian(&self, q: &JointVector<T>) -> Result<Jacobian<T>, KinematicsError> {
        if !q.is_finite() {
            return Err(KinematicsError::NonFinite);
        }
        let chain = self.chain(q);
        Ok(Self::jacobian_from_chain(&chain))
    }

    fn jacobian_from_chain(chain: &Chain<T>) -> Jacobian<T> {
        let p_tip = chain.tip.translation.vector;
        let mut jac = Jacobian::zeros();
        for i in 0..DOF {
            let z = chain.joint_axes[i];
            let lin = z.cross(&(p_tip - chain.joint_positions[i]));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        jac
    }
}

/// Yoshikawa manipulability `sqrt(det(J J^T))`.
pub fn manipulability<T: Real>(jac: &Jacobian<T>) -> T {
    let jjt = jac * jac.transpose();
    let det = jjt.determinant();
    if det > T::zero() {
        det.sqrt()
    } else {
        T::zero()
    }
}

/// Orientation error as the rotation vector of `target * current^-1`, in the base frame.
pub fn orientation_error<T: Real>(
    target: &UnitQuaternion<T>,
    current: &UnitQuaternion<T>,
) -> Vector3<T> {
    (target * current.inverse()).scaled_axis()
}

/// Pose error twist `(dp, dtheta)` between a target and a current pose.
pub fn pose_error<T: Real>(target: &Pose<T>, current: &Pose<T>) -> Vector6<T> {
    let dp = target.position - current.position;
    let dr = orientation_error(&target.orientation, &current.orientation);
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkOptions<T: Real> {
    /// Tip position tolerance (mm).
    pub pos_tol: T,
    /// Orientation tolerance (rad).
    pub ori_tol: T,
    pub max_iterations: usize,
    /// Damping used away from singularities.
    pub damping: T,
    /// Manipulability below which damping starts to grow.
    pub manipulability_threshold: T,
    pub max_damping: T,
    /// Gain of the null-space pull toward joint-range midpoints.
    pub null_space_gain: T,
    /// Largest per-joint change allowed in a single iteration (rad).
    pub max_step: T,
    /// Length (mm per rad) applied to the orientation rows so that both halves of the
    /// task are comparable under a single damping factor.
    pub orientation_weight: T,
}

impl<T: Real> Default for IkOptions<T> {
    fn default() -> Self {
        Self {
            pos_tol: T::lit(1e-3),
            ori_tol: T::lit(1e-4),
            max_iterations: 200,
            damping: T::lit(0.5),
            manipulability_threshold: T::lit(1e-4),
            max_damping: T::lit(50.0),
            null_space_gain: T::lit(0.1),
            max_step: T::lit(0.2),
            orientation_weight: T::lit(500.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkSolution<T: Real> {
    pub q: JointVector<T>,
    pub iterations: usize,
    pub position_error: T,
    pub orientation_error: T,
}

impl<T: Real> IkOptions<T> {
    fn damping_for(&self, w: T) -> T {
        if w >= self.manipulability_threshold {
            self.damping
        } else {
            let s = T::one() - w / self.manipulability_threshold;
            self.damping + (self.max_damping - self.damping) * s * s
        }
    }
}

/// Damped-least-squares inverse kinematics for the camera-tip pose.
///
/// Each iteration applies `dq = J^T (J J^T + lambda^2 I)^-1 e` plus a null-space pull
/// toward the joint-range midpoints, with `lambda` growing as manipulability drops below
/// the threshold. Iterates are clamped to the joint limits, so a returned solution is
/// always limit-feasible.
pub fn inverse_kinematics<T: Real>(
    model: &ArmModel<T>,
    target: &Pose<T>,
    seed: &JointVector<T>,
    opts: &IkOptions<T>,
) -> Result<IkSolution<T>, KinematicsError> {
    if !target.is_finite() || !seed.is_finite() {
        return Err(KinematicsError::NonFinite);
    }
    if let Some(joint) = (0..DOF).find(|&i| !model.joint_limits[i].contains(seed.0[i])) {
        return Err(KinematicsError::OutOfLimits { joint: joint + 1 });
    }
    match solve(model, target, seed, opts, true) {
        Ok(sol) => Ok(sol),
        Err(err) => {
            // Distinguish "unreachable" from "reachable only outside the joint limits".
            match solve(model, target, seed, opts, false) {
                Ok(free) => {
                    let joint = (0..DOF)
                        .find(|&i| !model.joint_limits[i].contains(free.q.0[i]))
                        .unwrap_or(0);
                    Err(KinematicsError::OutOfLimits { joint: joint + 1 })
                }
                Err(_) => Err(err),
            }
        }
    }
}

fn solve<T: Real>(
    model: &ArmModel<T>,
    target: &Pose<T>,
    seed: &JointVector<T>,
    opts: &IkOptions<T>,
    enforce_limits: bool,
) -> Result<IkSolution<T>, KinematicsError> {
    let unlimited = JointLimit {
        min: T::lit(-1e9),
        max: T::lit(1e9),
    };
    let limits = if enforce_limits {
        model.joint_limits
    } else {
        [unlimited; DOF]
    };
    let mid = model.limit_midpoints();
    let mut q = *seed;
    let mut current = IkState::evaluate(model, target, &q, opts);
    // Multiplier on the damping; grows whenever a step fails to reduce the task error.
    let mut boost = T::one();

    for iteration in 0..opts.max_iterations {
        if current.converged(opts) {
            return Ok(current.solution(q, iteration));
        }

        let jac = ArmModel::jacobian_from_chain(&current.chain);
        let lambda = opts.damping_for(manipulability(&jac)) * boost;
        // The null-space pull is second-order disruptive to the task; only use it while the
        // error is still coarse so the final iterations converge as plain DLS.
        let coarse = current.pos_err > opts.pos_tol * T::lit(10.0)
            || current.ori_err > opts.ori_tol * T::lit(10.0);

        // Joints resting on a limit that the step would push further out are frozen and the
        // step is recomputed without them.
        let mut frozen = [false; DOF];
        let mut dq = SVector::<T, DOF>::zeros();
        for _ in 0..DOF {
            let Some(step) = dls_step(&jac, &current.err, lambda, &frozen, opts) else {
                break;
            };
            dq = step;
            if coarse && boost == T::one() && opts.null_space_gain > T::zero() {
                dq += null_space_pull(&jac, &frozen, &(mid.0 - q.0), opts.null_space_gain);
            }
            let mut changed = false;
            for i in 0..DOF {
                let lim = limits[i];
                let pushing_out = (q.0[i] <= lim.min && dq[i] < T::zero())
                    || (q.0[i] >= lim.max && dq[i] > T::zero());
                if !frozen[i] && pushing_out {
                    frozen[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        for i in 0..DOF {
            if frozen[i] {
                dq[i] = T::zero();
            }
        }
        if dq.iter().all(|v| *v == T::zero()) {
            break;
        }

        let largest = dq.amax();
        if largest > opts.max_step {
            dq *= opts.max_step / largest;
        }
        let stepped = q.0 + dq;
        let candidate = JointVector(SVector::from_fn(|i, _| limits[i].clamp(stepped[i])));
        let next = IkState::evaluate(model, target, &candidate, opts);
        if next.task_norm < current.task_norm {
            q = candidate;
            current = next;
            boost = (boost * T::lit(0.5)).max(T::one());
        } else {
            boost *= T::lit(4.0);
            if lambda > T::lit(1e8) {
                break;
            }
        }
    }

    if current.converged(opts) {
        return Ok(current.solution(q, opts.max_iterations));
    }
    Err(KinematicsError::NotConverged {
        iterations: opts.max_iterations,
        position_error: current.pos_err.as_f64(),
        orientation_error: current.ori_err.as_f64(),
    })
}

struct IkState<T: Real> {
    chain: Chain<T>,
    err: Vector6<T>,
    pos_err: T,
    ori_err: T,
    task_norm: T,
}

impl<T: Real> IkState<T> {
    fn evaluate(
        model: &ArmModel<T>,
        target: &Pose<T>,
        q: &JointVector<T>,
        opts: &IkOptions<T>,
    ) -> Self {
        let chain = model.chain(q);
        let err = pose_error(target, &Pose::from_isometry(&chain.tip));
        let pos_err = err.fixed_rows::<3>(0).norm();
        let ori_err = err.fixed_rows::<3>(3).norm();
        let weighted_ori = ori_err * opts.orientation_weight;
        Self {
            chain,
            err,
            pos_err,
            ori_err,
            task_norm: (pos_err * pos_err + weighted_ori * weighted_ori).sqrt(),
        }
    }

    fn converged(&self, opts: &IkOptions<T>) -> bool {
        self.pos_err <= opts.pos_tol && self.ori_err <= opts.ori_tol
    }

    fn solution(&self, q: JointVector<T>, iterations: usize) -> IkSolution<T> {
        IkSolution {
            q,
            iterations,
            position_error: self.pos_err,
            orientation_error: self.ori_err,
        }
    }
}

fn masked<T: Real>(jac: &Jacobian<T>, frozen: &[bool; DOF]) -> Jacobian<T> {
    let mut out = *jac;
    for (i, f) in frozen.iter().enumerate() {
        if *f {
            out.column_mut(i).fill(T::zero());
        }
    }
    out
}

fn dls_step<T: Real>(
    jac: &Jacobian<T>,
    err: &Vector6<T>,
    lambda: T,
    frozen: &[bool; DOF],
    opts: &IkOptions<T>,
) -> Option<SVector<T, DOF>> {
    let mut weighted = masked(jac, frozen);
    let mut werr = *err;
    for r in 3..6 {
        weighted.row_mut(r).scale_mut(opts.orientation_weight);
        werr[r] *= opts.orientation_weight;
    }
    let jjt = weighted * weighted.transpose() + SMatrix::<T, 6, 6>::identity() * (lambda * lambda);
    let chol = jjt.cholesky()?;
    Some(weighted.transpose() * chol.solve(&werr))
}

fn null_space_pull<T: Real>(
    jac: &Jacobian<T>,
    frozen: &[bool; DOF],
    toward: &SVector<T, DOF>,
    gain: T,
) -> SVector<T, DOF> {
    let active = masked(jac, frozen);
    match active.pseudo_inverse(T::lit(1e-9)) {
        Ok(pinv) => {
            let projector = SMatrix::<T, DOF, DOF>::identity() - pinv * active;
            projector * toward * gain
        }
        Err(_) => SVector::zeros(),
    }
}
