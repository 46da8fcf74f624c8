//! Remote-center-of-motion parameterization of a camera passing through a fixed port.
//!
//! The shaft direction is `u = Ry(theta_y) * Rx(theta_x) * e_z`, i.e.
//! `u = (sin(ty) cos(tx), -sin(tx), cos(ty) cos(tx))`, and the tip sits at
//! `trocar_point + depth * u`.

use nalgebra::{Unit, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::scalar::Real;

/// Smallest tip-to-port distance for which the shaft direction is well defined (mm).
pub const MIN_DIRECTION_MM: f64 = 1.0;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum TrocarError {
    #[error("desired tip is {distance_mm:.3} mm from the trocar point; direction undefined")]
    DegenerateDirection { distance_mm: f64 },
    #[error("non-finite trocar input")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrocarState<T: Real> {
    pub trocar_point: Vector3<T>,
    pub theta_x: T,
    pub theta_y: T,
    pub depth: T,
}

impl<T: Real> TrocarState<T> {
    pub fn new(trocar_point: Vector3<T>, theta_x: T, theta_y: T, depth: T) -> Self {
        Self {
            trocar_point,
            theta_x,
            theta_y,
            depth,
        }
    }

    /// Builds the state whose shaft points along `u` (any length).
    pub fn from_direction(
        trocar_point: Vector3<T>,
        u: &Vector3<T>,
        depth: T,
    ) -> Result<Self, TrocarError> {
        let n = u.norm();
        if !n.finite() || !trocar_point.iter().all(|v| v.finite()) {
            return Err(TrocarError::NonFinite);
        }
        if n <= T::default_epsilon() {
            return Err(TrocarError::DegenerateDirection { distance_mm: 0.0 });
        }
        let (theta_x, theta_y) = angles(&(u / n));
        Ok(Self::new(trocar_point, theta_x, theta_y, depth))
    }

    pub fn direction(&self) -> Vector3<T> {
        shaft_direction(self.theta_x, self.theta_y)
    }

    pub fn tip(&self) -> Vector3<T> {
        self.trocar_point + self.direction() * self.depth
    }

    pub fn with_depth(&self, depth: T) -> Self {
        Self { depth, ..*self }
    }
}

pub fn shaft_direction<T: Real>(theta_x: T, theta_y: T) -> Vector3<T> {
    let (sx, cx) = theta_x.sin_cos();
    let (sy, cy) = theta_y.sin_cos();
    Vector3::new(sy * cx, -sx, cy * cx)
}

fn angles<T: Real>(u: &Vector3<T>) -> (T, T) {
    let uy = num_traits::clamp(-u.y, -T::one(), T::one());
    (uy.asin(), u.x.atan2(u.z))
}

/// Re-expresses a desired tip as a shaft through the trocar point. The returned state
/// reproduces `desired_tip` and its axis passes through the trocar point by construction.
pub fn rcm_constrain<T: Real>(
    trocar: &TrocarState<T>,
    desired_tip: &Vector3<T>,
) -> Result<TrocarState<T>, TrocarError> {
    if !desired_tip.iter().all(|v| v.finite()) {
        return Err(TrocarError::NonFinite);
    }
    let v = desired_tip - trocar.trocar_point;
    let d = v.norm();
    if d < T::lit(MIN_DIRECTION_MM) {
        return Err(TrocarError::DegenerateDirection {
            distance_mm: d.as_f64(),
        });
    }
    let (theta_x, theta_y) = angles(&(v / d));
    Ok(TrocarState::new(trocar.trocar_point, theta_x, theta_y, d))
}

/// Distance from `point` to the infinite line through `a` and `b`.
pub fn distance_to_line<T: Real>(point: &Vector3<T>, a: &Vector3<T>, b: &Vector3<T>) -> T {
    let dir = b - a;
    let n = dir.norm();
    if n <= T::default_epsilon() {
        return (point - a).norm();
    }
    (point - a).cross(&dir).norm() / n
}

/// Smallest rotation of `orientation` that brings its z-axis onto `axis`; keeps the roll
/// about the shaft as close as possible to the current one.
pub fn align_z<T: Real>(orientation: &UnitQuaternion<T>, axis: &Vector3<T>) -> UnitQuaternion<T> {
    let z = orientation * Vector3::z();
    let target = Unit::new_normalize(*axis);
    match UnitQuaternion::rotation_between(&z, &target) {
        Some(r) => r * orientation,
        // Antiparallel: turn half way round any axis perpendicular to z.
        None => {
            let perp = orientation * Vector3::x_axis();
            UnitQuaternion::from_axis_angle(&perp, T::pi()) * orientation
        }
    }
}
