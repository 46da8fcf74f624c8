use nalgebra::SVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use teleop_core::kinematics::{ArmModel, JointVector, Pose};

pub fn random_q(rng: &mut ChaCha8Rng, m: &ArmModel<f64>) -> JointVector<f64> {
    JointVector(SVector::from_fn(|i, _| {
        let l = m.joint_limits[i];
        rng.random_range(l.min..l.max)
    }))
}

/// A reachable target near `FK(q)`: the tip pose of a joint-space perturbation of `q`
/// whose tip lies within `radius` mm of the original tip.
pub fn reachable_target(
    rng: &mut ChaCha8Rng,
    m: &ArmModel<f64>,
    q: &JointVector<f64>,
    radius: f64,
) -> Pose<f64> {
    let tip = m.tip_pose(q).unwrap().position;
    let dir = SVector::<f64, 7>::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
    let wanted = rng.random_range(0.0..radius);
    let mut step = 0.05;
    loop {
        let moved = m.clamp_to_limits(&JointVector(q.0 + dir * step));
        let pose = m.tip_pose(&moved).unwrap();
        let d = (pose.position - tip).norm();
        if d <= wanted || step < 1e-9 {
            return pose;
        }
        step *= (wanted / d).min(0.9);
    }
}
