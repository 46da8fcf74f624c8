//! Operator-frame to robot-base-frame calibration.
//!
//! Operator devices report positions in meters, the robot works in millimeters. Readings
//! are first normalized to millimeters and then mapped by a rigid transform estimated from
//! marker correspondences (centroid subtraction + cross-covariance SVD).

use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Matrix3xX, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{ArmModel, JointVector, KinematicsError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("registration needs at least 3 point pairs, got {0}")]
    TooFewPairs(usize),
    #[error("marker points are degenerate (coincident or collinear); re-collect markers")]
    DegenerateGeometry,
    #[error("non-finite point in calibration data")]
    NonFinite,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// Converts an operator reading in meters to millimeters.
pub fn meters_to_millimeters<T: Real>(p: &Vector3<T>) -> Vector3<T> {
    p * T::lit(1000.0)
}

/// Rotation plus translation (mm) from the normalized operator frame to the robot base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// `R p + t`.
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self::new(rotation, -(rotation * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.apply(&other.translation),
        )
    }

    pub fn to_isometry(&self) -> Isometry3<T> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// Maps a raw operator reading (meters) into the robot base frame (mm).
    pub fn operator_to_robot(&self, operator_m: &Vector3<T>) -> Vector3<T> {
        self.apply(&meters_to_millimeters(operator_m))
    }
}

/// One marker correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPair<T: Real> {
    pub operator_m: Vector3<T>,
    pub robot_mm: Vector3<T>,
    pub label: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointPairSet<T: Real> {
    pub pairs: Vec<PointPair<T>>,
}

impl<T: Real> PointPairSet<T> {
    /// Pairs with operator points normalized to millimeters.
    pub fn millimeter_pairs(&self) -> Vec<(Vector3<T>, Vector3<T>)> {
        self.pairs
            .iter()
            .map(|p| (meters_to_millimeters(&p.operator_m), p.robot_mm))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualStats<T: Real> {
    pub rms: T,
    pub mean: T,
    pub max: T,
}

impl<T: Real> ResidualStats<T> {
    fn from_errors(errors: &[T]) -> Self {
        let n = T::from_usize(errors.len().max(1)).unwrap_or_else(T::one);
        let sum: T = errors.iter().fold(T::zero(), |a, e| a + *e);
        let sq: T = errors.iter().fold(T::zero(), |a, e| a + *e * *e);
        let max = errors.iter().fold(T::zero(), |a, e| a.max(*e));
        Self {
            rms: (sq / n).sqrt(),
            mean: sum / n,
            max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration<T: Real> {
    pub transform: RigidTransform<T>,
    pub residuals: Vec<T>,
    pub stats: ResidualStats<T>,
}

/// Least-squares rigid registration of `(operator_mm, robot_mm)` pairs.
///
/// The returned rotation is always proper: a mirrored configuration yields the best proper
/// rotation (with a larger residual), never a reflection.
pub fn register_frames<T: Real>(
    pairs: &[(Vector3<T>, Vector3<T>)],
) -> Result<Registration<T>, CalibrationError> {
    if pairs.len() < 3 {
        return Err(CalibrationError::TooFewPairs(pairs.len()));
    }
    if pairs
        .iter()
        .any(|(a, b)| a.iter().chain(b.iter()).any(|v| !v.finite()))
    {
        return Err(CalibrationError::NonFinite);
    }

    let n = T::from_usize(pairs.len()).unwrap_or_else(T::one);
    let src_centroid = pairs.iter().fold(Vector3::zeros(), |acc, (a, _)| acc + a) / n;
    let dst_centroid = pairs.iter().fold(Vector3::zeros(), |acc, (_, b)| acc + b) / n;

    let src = Matrix3xX::from_columns(
        &pairs
            .iter()
            .map(|(a, _)| a - src_centroid)
            .collect::<Vec<_>>(),
    );
    let dst = Matrix3xX::from_columns(
        &pairs
            .iter()
            .map(|(_, b)| b - dst_centroid)
            .collect::<Vec<_>>(),
    );

    // Rank of the centered operator points must be at least 2.
    let spread = src.clone().svd(false, false).singular_values;
    let mut sv: Vec<T> = spread.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if sv[0] <= T::zero() || sv[1] <= sv[0] * T::lit(1e-9) {
        return Err(CalibrationError::DegenerateGeometry);
    }

    let covariance: Matrix3<T> = &src * dst.transpose();
    let svd = covariance.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(CalibrationError::DegenerateGeometry);
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let sign = if d < T::zero() { -T::one() } else { T::one() };
    let correction = Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), sign));
    let rot = v * correction * u.transpose();
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let rotation = polish_rotation(rotation, &src, &dst);
    let translation = dst_centroid - rotation * src_centroid;
    let transform = RigidTransform::new(rotation, translation);

    let residuals: Vec<T> = pairs
        .iter()
        .map(|(a, b)| (transform.apply(a) - b).norm())
        .collect();
    let stats = ResidualStats::from_errors(&residuals);
    Ok(Registration {
        transform,
        residuals,
        stats,
    })
}

fn squared_error<T: Real>(r: &UnitQuaternion<T>, src: &Matrix3xX<T>, dst: &Matrix3xX<T>) -> T {
    src.column_iter()
        .zip(dst.column_iter())
        .fold(T::zero(), |acc, (a, b)| acc + (b - r * a).norm_squared())
}

/// Gauss-Newton steps on the rotation of centered point sets. The SVD leaves errors of
/// order 1e-9 on nearly collinear sets; a step is kept only if it lowers the error.
fn polish_rotation<T: Real>(
    mut rotation: UnitQuaternion<T>,
    src: &Matrix3xX<T>,
    dst: &Matrix3xX<T>,
) -> UnitQuaternion<T> {
    let mut err = squared_error(&rotation, src, dst);
    for _ in 0..3 {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (a, b) in src.column_iter().zip(dst.column_iter()) {
            let p = rotation * a;
            let k = p.cross_matrix();
            h += k.transpose() * k;
            g += k.transpose() * (b - p);
        }
        let Some(omega) = h.try_inverse().map(|hi| hi * g) else {
            break;
        };
        let next = UnitQuaternion::from_scaled_axis(-omega) * rotation;
        let next_err = squared_error(&next, src, dst);
        if next_err >= err {
            break;
        }
        rotation = next;
        err = next_err;
    }
    rotation
}

/// Registers a marker set whose operator points are still in meters.
pub fn register_point_pairs<T: Real>(
    set: &PointPairSet<T>,
) -> Result<Registration<T>, CalibrationError> {
    register_frames(&set.millimeter_pairs())
}

/// A calibration check point: the robot was driven to `joints`, and the operator device read
/// `operator_m` at the camera tip.
#[derive(Clone, Debug, PartialEq)]
pub struct JointMarker<T: Real> {
    pub operator_m: Vector3<T>,
    pub joints: JointVector<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport<T: Real> {
    pub errors_mm: Vec<T>,
    pub mean: T,
    pub max: T,
}

/// Per-marker distance between the mapped operator reading and the robot point (mm).
pub fn verify_points<T: Real>(
    transform: &RigidTransform<T>,
    markers: &[(Vector3<T>, Vector3<T>)],
) -> VerificationReport<T> {
    let errors_mm: Vec<T> = markers
        .iter()
        .map(|(op_m, robot_mm)| (transform.operator_to_robot(op_m) - robot_mm).norm())
        .collect();
    let stats = ResidualStats::from_errors(&errors_mm);
    VerificationReport {
        errors_mm,
        mean: stats.mean,
        max: stats.max,
    }
}

/// Same as [`verify_points`], with robot points taken from the camera-tip forward kinematics.
pub fn verify_calibration<T: Real>(
    model: &ArmModel<T>,
    transform: &RigidTransform<T>,
    markers: &[JointMarker<T>],
) -> Result<VerificationReport<T>, CalibrationError> {
    let points = markers
        .iter()
        .map(|m| Ok((m.operator_m, model.tip_pose(&m.joints)?.position)))
        .collect::<Result<Vec<_>, KinematicsError>>()?;
    Ok(verify_points(transform, &points))
}

/// `calibration.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub rotation_wxyz: [f64; 4],
    pub translation_mm: [f64; 3],
    pub residual_rms_mm: f64,
    pub residual_mean_mm: f64,
    pub residual_max_mm: f64,
    pub n_pairs: usize,
    /// Seconds since the Unix epoch at which the calibration was produced.
    pub timestamp: u64,
}

impl CalibrationFile {
    pub fn from_registration(reg: &Registration<f64>, timestamp: u64) -> Self {
        let q = reg.transform.rotation.quaternion();
        let t = reg.transform.translation;
        Self {
            rotation_wxyz: [q.w, q.i, q.j, q.k],
            translation_mm: [t.x, t.y, t.z],
            residual_rms_mm: reg.stats.rms,
            residual_mean_mm: reg.stats.mean,
            residual_max_mm: reg.stats.max,
            n_pairs: reg.residuals.len(),
            timestamp,
        }
    }

    pub fn transform(&self) -> RigidTransform<f64> {
        let [w, i, j, k] = self.rotation_wxyz;
        RigidTransform::new(
            UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, i, j, k)),
            Vector3::from(self.translation_mm),
        )
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        write_json(path, self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub operator_m: [f64; 3],
    pub robot_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// `pairs.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairsFile {
    pub pairs: Vec<PairRecord>,
}

impl PairsFile {
    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        write_json(path, self)
    }

    pub fn to_set(&self) -> PointPairSet<f64> {
        PointPairSet {
            pairs: self
                .pairs
                .iter()
                .map(|p| PointPair {
                    operator_m: Vector3::from(p.operator_m),
                    robot_mm: Vector3::from(p.robot_mm),
                    label: p.label.clone(),
                })
                .collect(),
        }
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, CalibrationError> {
    let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CalibrationError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CalibrationError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| CalibrationError::Json {
            path: path.display().to_string(),
            source,
        })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Unit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform<f64> {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        RigidTransform::new(
            UnitQuaternion::from_axis_angle(&axis, rng.random_range(-PI..PI)),
            Vector3::new(
                rng.random_range(-800.0..800.0),
                rng.random_range(-800.0..800.0),
                rng.random_range(0.0..1500.0),
            ),
        )
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-500.0..500.0),
                    rng.random_range(-500.0..500.0),
                    rng.random_range(-500.0..500.0),
                )
            })
            .collect()
    }

    #[test]
    fn unit_normalization() {
        assert_eq!(
            meters_to_millimeters(&Vector3::<f64>::zeros()),
            Vector3::zeros()
        );
        assert_eq!(
            meters_to_millimeters(&Vector3::new(0.3, 0.0, 0.0)),
            Vector3::new(300.0, 0.0, 0.0)
        );
        assert_eq!(
            meters_to_millimeters(&Vector3::new(-0.001, 0.002, 1.0)),
            Vector3::new(-1.0, 2.0, 1000.0)
        );
    }

    #[test]
    fn recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_transform(&mut rng);
        let pts = random_points(&mut rng, 4);
        let pairs: Vec<_> = pts.iter().map(|p| (*p, truth.apply(p))).collect();
        let reg = register_frames(&pairs).unwrap();
        assert!(reg.transform.rotation.angle_to(&truth.rotation) < 1e-9);
        assert!((reg.transform.translation - truth.translation).norm() < 1e-9);
        assert!(reg.stats.rms < 1e-9);
    }

    #[test]
    fn identity_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 5);
        let pairs: Vec<_> = pts.iter().map(|p| (*p, *p)).collect();
        let reg = register_frames(&pairs).unwrap();
        assert!(reg.transform.rotation.angle() < 1e-12);
        assert!(reg.transform.translation.norm() < 1e-9);
        assert!(reg.stats.rms < 1e-9);
    }

    #[test]
    fn too_few_pairs() {
        let pairs = vec![(Vector3::<f64>::zeros(), Vector3::zeros()); 2];
        assert!(matches!(
            register_frames(&pairs),
            Err(CalibrationError::TooFewPairs(2))
        ));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pairs: Vec<_> = (0..5)
            .map(|i| {
                let p = Vector3::new(i as f64 * 10.0, i as f64 * 5.0, 0.0);
                (p, p)
            })
            .collect();
        assert!(matches!(
            register_frames(&pairs),
            Err(CalibrationError::DegenerateGeometry)
        ));
        let same = vec![(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros()); 4];
        assert!(matches!(
            register_frames(&same),
            Err(CalibrationError::DegenerateGeometry)
        ));
    }

    #[test]
    fn mirrored_points_still_give_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 8);
        let pairs: Vec<_> = pts
            .iter()
            .map(|p| (*p, Vector3::new(-p.x, p.y, p.z)))
            .collect();
        let reg = register_frames(&pairs).unwrap();
        let det = reg
            .transform
            .rotation
            .to_rotation_matrix()
            .matrix()
            .determinant();
        assert_relative_eq!(det, 1.0, epsilon = 1e-12);
        assert!(reg.stats.rms > 1.0);
    }

    #[test]
    fn apply_and_inverse() {
        let id = RigidTransform::<f64>::identity();
        let p = Vector3::new(1.0, -2.0, 3.0);
        assert_eq!(id.apply(&p), p);

        let half_turn = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI),
            Vector3::zeros(),
        );
        assert!(
            (half_turn.apply(&Vector3::new(1.0, 0.0, 0.0)) - Vector3::new(-1.0, 0.0, 0.0)).norm()
                < 1e-12
        );

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_transform(&mut rng);
        assert!((t.apply(&t.inverse().apply(&p)) - p).norm() < 1e-9);
        let round = t.compose(&t.inverse());
        assert!(round.rotation.angle() < 1e-9 && round.translation.norm() < 1e-9);
    }

    #[test]
    fn verification_errors() {
        let id = RigidTransform::<f64>::identity();
        let exact = vec![(
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(100.0, 200.0, 300.0),
        )];
        let report = verify_points(&id, &exact);
        assert_eq!(report.errors_mm, vec![0.0]);

        let offset = vec![(Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0))];
        let report = verify_points(&id, &offset);
        assert_eq!(report.errors_mm, vec![1.0]);
        assert_eq!(report.max, 1.0);
    }

    #[test]
    fn verification_against_forward_kinematics() {
        let model: ArmModel<f64> = crate::kinematics::ArmDescription::default()
            .to_model()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_transform(&mut rng);
        let markers: Vec<_> = (0..6)
            .map(|i| {
                let q =
                    JointVector::from_degrees([i as f64 * 10.0, 20.0, 0.0, -90.0, 5.0, 50.0, 0.0]);
                let tip = model.tip_pose(&q).unwrap().position;
                JointMarker {
                    operator_m: truth.inverse().apply(&tip) / 1000.0,
                    joints: q,
                }
            })
            .collect();
        let report = verify_calibration(&model, &truth, &markers).unwrap();
        assert!(report.max < 1e-9);
    }

    /// Monte-Carlo band for the mean marker error under isotropic reading noise.
    #[test]
    fn noisy_marker_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let truth = random_transform(&mut rng);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for _ in 0..1000 {
            let markers: Vec<_> = random_points(&mut rng, 10)
                .into_iter()
                .map(|robot| {
                    let jitter = Vector3::from_fn(|_, _| noise.sample(&mut rng));
                    (truth.inverse().apply(&(robot + jitter)) / 1000.0, robot)
                })
                .collect();
            let mean = verify_points(&truth, &markers).mean;
            lo = lo.min(mean);
            hi = hi.max(mean);
        }
        assert!(lo >= 0.3 && hi <= 1.2, "empirical band [{lo}, {hi}]");
    }

    #[test]
    fn calibration_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = random_transform(&mut rng);
        let pts = random_points(&mut rng, 6);
        let pairs: Vec<_> = pts.iter().map(|p| (*p, truth.apply(p))).collect();
        let reg = register_frames(&pairs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calibration.json");
        CalibrationFile::from_registration(&reg, 0)
            .save(&path)
            .unwrap();
        let loaded = CalibrationFile::load(&path).unwrap().transform();
        assert!(loaded.rotation.angle_to(&truth.rotation) < 1e-9);
        assert!((loaded.translation - truth.translation).norm() < 1e-9);
    }
}
