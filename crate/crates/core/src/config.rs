//! Server configuration file: arm geometry, home pose, simulator limits and session settings.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{ArmDescription, ArmModel, JointLimit, JointVector, DOF};
use crate::robot_sim::{SafetyBox, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Operator-adjustable session parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSettings {
    pub scale: f64,
    pub insert_increment_mm: f64,
    pub insert_velocity_mm_s: f64,
    /// Gap between the approach end point and the trocar point (mm).
    pub standoff_mm: f64,
    /// Largest tip spacing between approach waypoints (mm).
    pub waypoint_spacing_mm: f64,
    /// Largest orientation change between approach waypoints (rad).
    pub waypoint_rotation_rad: f64,
    pub max_depth_mm: f64,
    /// Consecutive IK failures tolerated before the operator is told.
    pub ik_skip_limit: u32,
}

pub const SCALE_RANGE: (f64, f64) = (0.05, 10.0);

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            scale: 1.0,
            insert_increment_mm: 1.0,
            insert_velocity_mm_s: 2.0,
            standoff_mm: 20.0,
            waypoint_spacing_mm: 1.0,
            waypoint_rotation_rad: 0.005,
            max_depth_mm: 150.0,
            ik_skip_limit: 10,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

impl SessionSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_scale(self.scale)?;
        positive("insert_increment_mm", self.insert_increment_mm)?;
        positive("insert_velocity_mm_s", self.insert_velocity_mm_s)?;
        positive("standoff_mm", self.standoff_mm)?;
        positive("waypoint_spacing_mm", self.waypoint_spacing_mm)?;
        positive("waypoint_rotation_rad", self.waypoint_rotation_rad)?;
        positive("max_depth_mm", self.max_depth_mm)?;
        if self.ik_skip_limit == 0 {
            return Err(ConfigError::Invalid(
                "ik_skip_limit must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn validate_scale(scale: f64) -> Result<(), ConfigError> {
    let (lo, hi) = SCALE_RANGE;
    if scale.is_finite() && (lo..=hi).contains(&scale) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!(
            "scale must lie in [{lo}, {hi}], got {scale}"
        )))
    }
}

/// Everything `serve` and `replay` need besides the calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub arm: ArmDescription,
    pub home_joints_deg: [f64; DOF],
    pub tick_rate_hz: f64,
    pub vel_limit_rad_s: f64,
    /// `[[xmin, xmax], [ymin, ymax], [zmin, zmax]]`.
    pub safety_box_mm: [[f64; 2]; 3],
    /// Virtual joint intervals; absent means the hard limits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_planes_deg: Option<[[f64; 2]; DOF]>,
    #[serde(flatten)]
    pub session: SessionSettings,
}

/// Elbow bent, camera pointing straight down in front of the base.
pub const HOME_JOINTS_DEG: [f64; DOF] = [0.0, 20.0, 0.0, -100.0, 0.0, 60.0, 0.0];

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            arm: ArmDescription::default(),
            home_joints_deg: HOME_JOINTS_DEG,
            tick_rate_hz: 100.0,
            vel_limit_rad_s: 1.0,
            safety_box_mm: [[-800.0, 800.0], [-800.0, 800.0], [0.0, 1700.0]],
            joint_planes_deg: None,
            session: SessionSettings::default(),
        }
    }
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.session.validate()?;
        positive("tick_rate_hz", self.tick_rate_hz)?;
        positive("vel_limit_rad_s", self.vel_limit_rad_s)?;
        for (i, [lo, hi]) in self.safety_box_mm.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ConfigError::Invalid(format!(
                    "safety_box_mm axis {i} must satisfy min < max"
                )));
            }
        }
        self.model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<ArmModel<f64>, ConfigError> {
        self.arm
            .to_model()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn home(&self) -> JointVector<f64> {
        JointVector::from_degrees(self.home_joints_deg)
    }

    pub fn sim_config(&self) -> SimConfig {
        let [x, y, z] = self.safety_box_mm;
        SimConfig {
            tick_rate_hz: self.tick_rate_hz,
            vel_limit_rad_s: self.vel_limit_rad_s,
            safety_box: SafetyBox {
                min: Vector3::new(x[0], y[0], z[0]),
                max: Vector3::new(x[1], y[1], z[1]),
            },
            joint_planes: self.joint_planes_deg.map(|planes| {
                planes.map(|[lo, hi]| JointLimit {
                    min: lo.to_radians(),
                    max: hi.to_radians(),
                })
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ServerConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ServerConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(text.contains("\"scale\":1.0"));
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg: ServerConfig =
            serde_json::from_str(r#"{"scale": 0.5, "tick_rate_hz": 50}"#).unwrap();
        assert_eq!(cfg.session.scale, 0.5);
        assert_eq!(cfg.tick_rate_hz, 50.0);
        assert_eq!(cfg.session.standoff_mm, 20.0);
    }

    #[test]
    fn rejects_bad_values() {
        let cfg: ServerConfig = serde_json::from_str(r#"{"scale": 20}"#).unwrap();
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<ServerConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
