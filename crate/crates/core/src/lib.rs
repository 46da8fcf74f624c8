pub mod calibration;
pub mod config;
pub mod kinematics;
pub mod metrics;
pub mod protocol;
pub mod robot_sim;
pub mod scalar;
pub mod server;
pub mod session;
pub mod tasks;
pub mod trocar;

pub use scalar::Real;

pub type ArmModel = kinematics::ArmModel<f64>;
pub type JointVector = kinematics::JointVector<f64>;
pub type Pose = kinematics::Pose<f64>;
pub type RigidTransform = calibration::RigidTransform<f64>;
pub type TrocarState = trocar::TrocarState<f64>;

pub type ArmModelF32 = kinematics::ArmModel<f32>;
pub type JointVectorF32 = kinematics::JointVector<f32>;
pub type PoseF32 = kinematics::Pose<f32>;
pub type RigidTransformF32 = calibration::RigidTransform<f32>;
pub type TrocarStateF32 = trocar::TrocarState<f32>;
