//! Discrete-time robot stand-in: latest-wins joint targets, per-tick velocity clamping,
//! virtual joint planes and a Cartesian safety box on the camera tip.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{ArmModel, JointLimit, JointVector, DOF};

/// Slack on the per-tick step when snapping onto the target (floating-point round-off).
const SNAP_EPS: f64 = 1e-12;
/// Joint-space distance at which [`RobotSim::settle`] considers the target reached.
pub const SETTLE_TOL_RAD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("joint {joint} target {value_deg:.3} deg outside its virtual plane")]
    PlaneViolation { joint: usize, value_deg: f64 },
    #[error("tip {value_mm:.3} mm on the {axis:?} axis is outside the safety box")]
    BoxViolation { axis: Axis, value_mm: f64 },
    #[error("non-finite joint target")]
    NonFinite,
    #[error("target not reached within {0} ticks")]
    Timeout(u64),
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
}

/// Axis-aligned bounds on the tip position (mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Default for SafetyBox {
    fn default() -> Self {
        Self {
            min: Vector3::new(-800.0, -800.0, 0.0),
            max: Vector3::new(800.0, 800.0, 1700.0),
        }
    }
}

impl SafetyBox {
    /// First violated axis, if any.
    pub fn check(&self, p: &Vector3<f64>) -> Result<(), SimError> {
        for (i, axis) in [Axis::X, Axis::Y, Axis::Z].into_iter().enumerate() {
            if !(p[i] >= self.min[i] && p[i] <= self.max[i]) {
                return Err(SimError::BoxViolation {
                    axis,
                    value_mm: p[i],
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.check(p).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub tick_rate_hz: f64,
    pub vel_limit_rad_s: f64,
    pub safety_box: SafetyBox,
    /// Virtual joint intervals; `None` uses the arm's hard limits.
    pub joint_planes: Option<[JointLimit<f64>; DOF]>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick_rate_hz: 100.0,
            vel_limit_rad_s: 1.0,
            safety_box: SafetyBox::default(),
            joint_planes: None,
        }
    }
}

/// State published after every tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimSample {
    pub tick: u64,
    pub q: JointVector<f64>,
    pub tip: Vector3<f64>,
    /// True when the last tick's motion was withheld because it would leave the safety box.
    pub blocked: bool,
}

#[derive(Clone, Debug)]
pub struct RobotSim {
    model: ArmModel<f64>,
    tick_rate_hz: f64,
    max_step: f64,
    safety_box: SafetyBox,
    planes: [JointLimit<f64>; DOF],
    q: JointVector<f64>,
    q_target: JointVector<f64>,
    tick: u64,
    blocked: bool,
}

impl RobotSim {
    pub fn new(
        model: ArmModel<f64>,
        config: &SimConfig,
        start: JointVector<f64>,
    ) -> Result<Self, SimError> {
        if !(config.tick_rate_hz > 0.0 && config.tick_rate_hz.is_finite()) {
            return Err(SimError::InvalidConfig(
                "tick_rate_hz must be positive".into(),
            ));
        }
        if !(config.vel_limit_rad_s > 0.0 && config.vel_limit_rad_s.is_finite()) {
            return Err(SimError::InvalidConfig(
                "vel_limit_rad_s must be positive".into(),
            ));
        }
        let planes = config.joint_planes.unwrap_or(model.joint_limits);
        for (i, (plane, hard)) in planes.iter().zip(model.joint_limits.iter()).enumerate() {
            if plane.min >= plane.max || plane.min < hard.min || plane.max > hard.max {
                return Err(SimError::InvalidConfig(format!(
                    "joint {} plane must be a non-empty subset of the hard limits",
                    i + 1
                )));
            }
        }
        let mut sim = Self {
            model,
            tick_rate_hz: config.tick_rate_hz,
            max_step: config.vel_limit_rad_s / config.tick_rate_hz,
            safety_box: config.safety_box,
            planes,
            q: start,
            q_target: start,
            tick: 0,
            blocked: false,
        };
        sim.check_target(&start)?;
        sim.q = start;
        Ok(sim)
    }

    pub fn model(&self) -> &ArmModel<f64> {
        &self.model
    }

    pub fn q(&self) -> JointVector<f64> {
        self.q
    }

    pub fn target(&self) -> JointVector<f64> {
        self.q_target
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn tick_rate_hz(&self) -> f64 {
        self.tick_rate_hz
    }

    /// Largest per-tick joint change (rad).
    pub fn max_step(&self) -> f64 {
        self.max_step
    }

    pub fn planes(&self) -> &[JointLimit<f64>; DOF] {
        &self.planes
    }

    pub fn safety_box(&self) -> &SafetyBox {
        &self.safety_box
    }

    pub fn tip(&self) -> Vector3<f64> {
        self.tip_of(&self.q)
    }

    fn tip_of(&self, q: &JointVector<f64>) -> Vector3<f64> {
        self.model
            .tip_pose(q)
            .map(|p| p.position)
            .unwrap_or_else(|_| Vector3::repeat(f64::NAN))
    }

    fn check_target(&self, q: &JointVector<f64>) -> Result<(), SimError> {
        if !q.is_finite() {
            return Err(SimError::NonFinite);
        }
        for (i, plane) in self.planes.iter().enumerate() {
            if !plane.contains(q.0[i]) {
                return Err(SimError::PlaneViolation {
                    joint: i + 1,
                    value_deg: q.0[i].to_degrees(),
                });
            }
        }
        self.safety_box.check(&self.tip_of(q))
    }

    /// Replaces the current target. Rejected targets leave the previous one in place.
    pub fn submit_target(&mut self, q_target: JointVector<f64>) -> Result<(), SimError> {
        self.check_target(&q_target)?;
        self.q_target = q_target;
        Ok(())
    }

    /// Advances one tick, moving every joint toward the target by at most the velocity limit.
    pub fn step(&mut self) -> SimSample {
        let mut next = self.q;
        for i in 0..DOF {
            let delta = self.q_target.0[i] - self.q.0[i];
            next.0[i] = if delta.abs() <= self.max_step + SNAP_EPS {
                self.q_target.0[i]
            } else {
                self.q.0[i] + self.max_step.copysign(delta)
            };
        }
        // Joint-space interpolation between two in-box configurations can still leave the box.
        self.blocked = !self.safety_box.contains(&self.tip_of(&next));
        if !self.blocked {
            self.q = next;
        }
        self.tick += 1;
        self.sample()
    }

    pub fn sample(&self) -> SimSample {
        SimSample {
            tick: self.tick,
            q: self.q,
            tip: self.tip(),
            blocked: self.blocked,
        }
    }

    pub fn at_target(&self) -> bool {
        self.q.max_abs_diff(&self.q_target) < SETTLE_TOL_RAD
    }

    /// Steps until the target is reached; returns the number of ticks taken.
    pub fn settle(&mut self, timeout_ticks: u64) -> Result<u64, SimError> {
        let mut ticks = 0;
        while !self.at_target() {
            if ticks >= timeout_ticks {
                return Err(SimError::Timeout(timeout_ticks));
            }
            self.step();
            ticks += 1;
        }
        Ok(ticks)
    }
}
