//! Task fixtures (plane figures, point targets with trocar insertion, free 3D trajectory)
//! and their closed-loop replay at simulated time.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationFile, RigidTransform};
use crate::config::ServerConfig;
use crate::metrics::{
    latency_stats, mean_max, task_timer, trajectory_deviation, AlignedSample, Marker, TaskReport,
    TrajectorySample, REPORT_VERSION,
};
use crate::protocol::Mode;
use crate::protocol::{GateVerdict, InsertDirection, PinchGate, Role, WireMessage};
use crate::session::{CommandCause, Event, Phase, Session, SessionError};
use crate::trocar::distance_to_line;

pub const SCRIPT_VERSION: u32 = 1;
pub const OPERATOR_ID: &str = "operator";

/// Hand sampling rate of generated scripts (Hz).
pub const SAMPLE_RATE_HZ: f64 = 60.0;
/// Tip speed of generated drags (mm/s).
pub const DRAG_SPEED_MM_S: f64 = 40.0;
const GAP_MS: f64 = 500.0;
/// Simulated time allowed after the last script event before replay gives up.
const DRAIN_LIMIT_S: f64 = 600.0;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task {0}; expected 1, 2 or 3")]
    UnknownTask(u8),
    #[error("script violation at event {index}: {detail}")]
    ScriptViolation { index: usize, detail: String },
    #[error("replay did not finish within {0} s of simulated time")]
    Stalled(f64),
    #[error(transparent)]
    Session(#[from] SessionError),
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
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Connect {
        client_id: String,
        role: Role,
    },
    Message {
        client_id: String,
        msg: WireMessage,
    },
    Marker {
        marker: Marker,
    },
    /// Measure the tip against `scene.targets_mm[target]` once the robot has settled.
    Checkpoint {
        target: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub t_ms: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub name: String,
    /// Closed polyline in the robot frame (mm); the last point repeats the first.
    pub points_mm: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane_z_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub figures: Vec<Figure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets_mm: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trocar_mm: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trocar_axis: Option<[f64; 3]>,
    /// Placeholder torso box: centre and half extents (mm).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torso_mm: Option<[[f64; 3]; 2]>,
    /// Expected total insertion (mm).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertion_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub script_version: u32,
    pub task_id: u8,
    pub seed: u64,
    pub config: ServerConfig,
    pub calibration: CalibrationFile,
    pub scene: Scene,
    pub events: Vec<ScriptEvent>,
}

impl TaskScript {
    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| TaskError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("script serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), TaskError> {
        std::fs::write(path, self.to_json()).map_err(|source| TaskError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Sum of the insertion increments the script requests (mm, signed).
    pub fn insertion_total_mm(&self) -> f64 {
        let mut increment = self.config.session.insert_increment_mm;
        let mut total = 0.0;
        for ev in &self.events {
            if let Action::Message { msg, .. } = &ev.action {
                match msg {
                    WireMessage::ConfigSet {
                        insert_increment_mm: Some(i),
                        ..
                    } => increment = *i,
                    WireMessage::Insert { direction } => {
                        total += match direction {
                            InsertDirection::In => increment,
                            InsertDirection::Out => -increment,
                        }
                    }
                    _ => {}
                }
            }
        }
        total
    }
}

/// Builds scripts: keeps track of the robot-side tip and converts intended tip paths into
/// operator-frame wrist samples.
struct Builder {
    t_ms: f64,
    seq: u64,
    scale: f64,
    tip: Vector3<f64>,
    transform: RigidTransform<f64>,
    events: Vec<ScriptEvent>,
}

impl Builder {
    fn push(&mut self, action: Action) {
        self.events.push(ScriptEvent {
            t_ms: self.t_ms,
            action,
        });
    }

    fn send(&mut self, msg: WireMessage) {
        self.push(Action::Message {
            client_id: OPERATOR_ID.into(),
            msg,
        });
    }

    fn wait(&mut self, ms: f64) {
        self.t_ms += ms;
    }

    fn operator_m(&self, robot_mm: &Vector3<f64>) -> Vector3<f64> {
        self.transform.inverse().apply(robot_mm) / 1000.0
    }

    /// One pinch whose commanded tip follows `path` (robot frame, mm, starting at the tip).
    fn drag(&mut self, path: &[Vector3<f64>]) {
        let anchor = self.tip;
        let hand_origin = anchor;
        self.send(WireMessage::PinchStart {
            t_client_ms: self.t_ms as u64,
        });
        self.wait(1000.0 / SAMPLE_RATE_HZ);
        for p in path {
            let hand = hand_origin + (p - anchor) / self.scale;
            let op = self.operator_m(&hand);
            self.seq += 1;
            self.send(WireMessage::WristSample {
                seq: self.seq,
                t_client_ms: self.t_ms as u64,
                x_m: op.x,
                y_m: op.y,
                z_m: op.z,
            });
            self.wait(1000.0 / SAMPLE_RATE_HZ);
        }
        self.send(WireMessage::PinchEnd {
            t_client_ms: self.t_ms as u64,
            last_seq: self.seq,
        });
        if let Some(last) = path.last() {
            self.tip = *last;
        }
        self.wait(GAP_MS);
    }

    fn drag_polyline(&mut self, vertices: &[Vector3<f64>]) {
        let mut pts = vec![self.tip];
        pts.extend_from_slice(vertices);
        self.drag(&resample_polyline(&pts, DRAG_SPEED_MM_S / SAMPLE_RATE_HZ));
    }
}

/// Points along a polyline at constant spacing, starting at the first vertex and ending
/// exactly on the last.
pub fn resample_polyline(vertices: &[Vector3<f64>], spacing: f64) -> Vec<Vector3<f64>> {
    let mut out = vec![vertices[0]];
    let total: f64 = vertices.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    if total == 0.0 {
        return out;
    }
    let n = (total / spacing).ceil() as usize;
    let step = total / n as f64;
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 1..=n {
        let s = (k as f64 * step).min(total);
        while seg + 1 < vertices.len() - 1
            && seg_start + (vertices[seg + 1] - vertices[seg]).norm() < s
        {
            seg_start += (vertices[seg + 1] - vertices[seg]).norm();
            seg += 1;
        }
        let a = vertices[seg];
        let b = vertices[seg + 1];
        let len = (b - a).norm();
        let f = if len > 0.0 {
            ((s - seg_start) / len).min(1.0)
        } else {
            1.0
        };
        out.push(a + (b - a) * f);
    }
    *out.last_mut().expect("non-empty") = *vertices.last().expect("non-empty");
    out
}

fn operator_transform(rng: &mut ChaCha8Rng, home_tip: &Vector3<f64>) -> RigidTransform<f64> {
    let yaw = Uniform::new(-PI, PI).expect("valid range").sample(rng);
    let tilt = Uniform::new(-0.1, 0.1).expect("valid range");
    let rotation = UnitQuaternion::from_euler_angles(tilt.sample(rng), tilt.sample(rng), yaw);
    // Operator stands with the tip roughly at chest height in front of them.
    let hand_mm = Vector3::new(
        rng.random_range(200.0..400.0),
        rng.random_range(-200.0..200.0),
        rng.random_range(300.0..600.0),
    );
    RigidTransform::new(rotation, home_tip - rotation * hand_mm)
}

fn calibration_record(t: &RigidTransform<f64>) -> CalibrationFile {
    let q = t.rotation.quaternion();
    CalibrationFile {
        rotation_wxyz: [q.w, q.i, q.j, q.k],
        translation_mm: t.translation.into(),
        residual_rms_mm: 0.0,
        residual_mean_mm: 0.0,
        residual_max_mm: 0.0,
        n_pairs: 0,
        timestamp: 0,
    }
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Deterministic fixture for task 1, 2 or 3 with the default configuration.
pub fn gen_task(task_id: u8, seed: u64) -> Result<TaskScript, TaskError> {
    gen_task_with(task_id, seed, &ServerConfig::default())
}

pub fn gen_task_with(
    task_id: u8,
    seed: u64,
    config: &ServerConfig,
) -> Result<TaskScript, TaskError> {
    if !(1..=3).contains(&task_id) {
        return Err(TaskError::UnknownTask(task_id));
    }
    config.validate().map_err(SessionError::from)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ task_id as u64);
    let model = config.model().map_err(SessionError::from)?;
    let home_tip = model
        .tip_pose(&config.home())
        .map_err(|e| SessionError::Config(crate::config::ConfigError::Invalid(e.to_string())))?
        .position;
    let transform = operator_transform(&mut rng, &home_tip);
    let mut b = Builder {
        t_ms: 0.0,
        seq: 0,
        scale: config.session.scale,
        tip: home_tip,
        transform,
        events: Vec::new(),
    };
    b.push(Action::Connect {
        client_id: OPERATOR_ID.into(),
        role: Role::Operator,
    });
    b.wait(100.0);
    b.push(Action::Marker {
        marker: Marker::TaskStart,
    });
    let mut scene = Scene::default();
    match task_id {
        1 => task_plane_figures(&mut b, &mut rng, &mut scene),
        2 => task_targets_and_insertion(&mut b, &mut rng, &mut scene),
        _ => task_free_curve(&mut b, &mut rng, &mut scene),
    }
    b.push(Action::Marker {
        marker: Marker::TaskEnd,
    });
    Ok(TaskScript {
        script_version: SCRIPT_VERSION,
        task_id,
        seed,
        config: config.clone(),
        calibration: calibration_record(&transform),
        scene,
        events: b.events,
    })
}

fn jitter(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    rng.random_range(-half..half)
}

/// Square (100 mm side), circle (r = 50 mm) and triangle traced on the horizontal plane
/// through the home tip.
fn task_plane_figures(b: &mut Builder, rng: &mut ChaCha8Rng, scene: &mut Scene) {
    let z = b.tip.z;
    let mut centre = |y: f64| Vector3::new(b.tip.x + jitter(rng, 10.0), y + jitter(rng, 10.0), z);
    let (cs, cc, ct) = (centre(-110.0), centre(0.0), centre(110.0));
    let square: Vec<_> = [
        (-50.0, -50.0),
        (50.0, -50.0),
        (50.0, 50.0),
        (-50.0, 50.0),
        (-50.0, -50.0),
    ]
    .iter()
    .map(|(dx, dy)| cs + Vector3::new(*dx, *dy, 0.0))
    .collect();
    let circle: Vec<_> = (0..=96)
        .map(|k| {
            let a = TAU * k as f64 / 96.0;
            cc + Vector3::new(50.0 * a.cos(), 50.0 * a.sin(), 0.0)
        })
        .collect();
    let triangle: Vec<_> = (0..=3)
        .map(|k| {
            let a = TAU * (k % 3) as f64 / 3.0 + PI / 2.0;
            ct + Vector3::new(50.0 * a.cos(), 50.0 * a.sin(), 0.0)
        })
        .collect();
    scene.plane_z_mm = Some(z);
    for (name, pts) in [
        ("square", square),
        ("circle", circle),
        ("triangle", triangle),
    ] {
        b.drag_polyline(&pts[..1]);
        b.drag_polyline(&pts[1..]);
        scene.figures.push(Figure {
            name: name.into(),
            points_mm: pts.iter().map(arr).collect(),
        });
    }
}

/// Three point targets, then a straight approach to a trocar above a placeholder torso and
/// 30 one-millimetre insertion increments.
fn task_targets_and_insertion(b: &mut Builder, rng: &mut ChaCha8Rng, scene: &mut Scene) {
    let home = b.tip;
    for _ in 0..3 {
        let target = home
            + Vector3::new(
                jitter(rng, 80.0),
                jitter(rng, 120.0),
                rng.random_range(0.0..80.0),
            );
        b.drag_polyline(&[target]);
        scene.targets_mm.push(arr(&target));
        b.push(Action::Checkpoint {
            target: scene.targets_mm.len() - 1,
        });
    }
    let trocar = Vector3::new(home.x + jitter(rng, 20.0), jitter(rng, 20.0), home.z - 30.0);
    let axis = Vector3::new(0.0, 0.0, -1.0);
    scene.trocar_mm = Some(arr(&trocar));
    scene.trocar_axis = Some(arr(&axis));
    scene.torso_mm = Some([
        [trocar.x, trocar.y, trocar.z - 100.0],
        [150.0, 200.0, 100.0],
    ]);
    b.send(WireMessage::Approach {
        trocar_mm: arr(&trocar),
        axis: Some(arr(&axis)),
    });
    b.wait(GAP_MS);
    b.send(WireMessage::ConfigSet {
        scale: None,
        insert_increment_mm: Some(1.0),
        insert_velocity_mm_s: Some(2.0),
    });
    for _ in 0..30 {
        b.send(WireMessage::Insert {
            direction: InsertDirection::In,
        });
        b.wait(GAP_MS);
    }
    scene.insertion_mm = Some(30.0);
}

/// Smooth closed 3D curve around the home tip, traced with motion scale 0.5.
fn task_free_curve(b: &mut Builder, rng: &mut ChaCha8Rng, scene: &mut Scene) {
    let scale = 0.5;
    b.send(WireMessage::ConfigSet {
        scale: Some(scale),
        insert_increment_mm: None,
        insert_velocity_mm_s: None,
    });
    b.scale = scale;
    b.wait(GAP_MS);
    let home = b.tip;
    let (ax, ay, az) = (
        rng.random_range(40.0..60.0),
        rng.random_range(40.0..60.0),
        rng.random_range(20.0..40.0),
    );
    let phase = rng.random_range(0.0..TAU);
    let duration_s = 20.0;
    let n = (duration_s * SAMPLE_RATE_HZ) as usize;
    let path: Vec<_> = (1..=n)
        .map(|k| {
            let s = TAU * k as f64 / n as f64;
            home + Vector3::new(
                ax * s.sin(),
                ay * (2.0 * s).sin() / 2.0 + ay * (1.0 - s.cos()) / 2.0,
                az * ((3.0 * s + phase).sin() - phase.sin()),
            )
        })
        .collect();
    scene.figures.push(Figure {
        name: "curve".into(),
        points_mm: std::iter::once(home)
            .chain(path.iter().copied())
            .map(|p| arr(&p))
            .collect(),
    });
    b.drag(&path);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Measure decode-to-command latency with the wall clock instead of simulated time.
    pub wall_clock_latency: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutput {
    pub report: TaskReport,
    pub aligned: Vec<AlignedSample>,
}

/// Checks ordering and per-client pinch gating without running anything.
pub fn validate_script(script: &TaskScript) -> Result<(), TaskError> {
    let mut gates: BTreeMap<&str, PinchGate> = BTreeMap::new();
    let mut last_t = f64::NEG_INFINITY;
    for (index, ev) in script.events.iter().enumerate() {
        let violation = |detail: String| TaskError::ScriptViolation { index, detail };
        if !ev.t_ms.is_finite() || ev.t_ms < last_t {
            return Err(violation(
                "event times must be finite and non-decreasing".into(),
            ));
        }
        last_t = ev.t_ms;
        match &ev.action {
            Action::Connect { client_id, .. } => {
                gates.insert(client_id, PinchGate::default());
            }
            Action::Message { client_id, msg } => {
                let gate = gates
                    .get_mut(client_id.as_str())
                    .ok_or_else(|| violation(format!("{client_id} sends before connecting")))?;
                if let GateVerdict::Violation(detail) = gate.check(msg) {
                    return Err(violation(detail));
                }
            }
            Action::Checkpoint { target } if *target >= script.scene.targets_mm.len() => {
                return Err(violation(format!("checkpoint for unknown target {target}")));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Runs the script through a session and simulator in simulated time.
pub fn replay(script: &TaskScript, opts: ReplayOptions) -> Result<ReplayOutput, TaskError> {
    validate_script(script)?;
    let mut session = Session::new(&script.config, script.calibration.transform())?;
    let dt_ms = 1000.0 / script.config.tick_rate_hz;
    let last_t = script.events.last().map_or(0.0, |e| e.t_ms);
    let max_ticks = ((last_t + DRAIN_LIMIT_S * 1000.0) / dt_ms).ceil() as u64;

    let mut hand = Vec::new();
    let mut tip = vec![TrajectorySample::new(0.0, session.sim().tip())];
    let mut errors = Vec::new();
    let mut latencies = Vec::new();
    let mut markers = Vec::new();
    let mut target_errors = vec![f64::NAN; script.scene.targets_mm.len()];
    let mut max_trocar: f64 = 0.0;
    let mut n_commands = 0u64;
    let mut offset_ms = 0.0;
    let mut next = 0;
    let mut tick = 0u64;

    loop {
        let clock = tick as f64 * dt_ms;
        let mut pending_target = None;
        while next < script.events.len() {
            let ev = &script.events[next];
            let at = ev.t_ms + offset_ms;
            if at >= clock + dt_ms || held(&session, &ev.action) {
                break;
            }
            next += 1;
            match &ev.action {
                Action::Connect { client_id, role } => {
                    session.handle(Event::Connect {
                        client_id: client_id.clone(),
                        role: *role,
                    });
                }
                Action::Marker { marker } => markers.push((*marker, at)),
                Action::Checkpoint { target } => {
                    let goal = Vector3::from(script.scene.targets_mm[*target]);
                    target_errors[*target] = (session.sim().tip() - goal).norm();
                }
                Action::Message { client_id, msg } => {
                    let started = opts.wall_clock_latency.then(Instant::now);
                    let fx = session.handle(Event::Message {
                        client_id: client_id.clone(),
                        msg: msg.clone(),
                    });
                    let elapsed_us = started.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e6);
                    n_commands += fx.commands.len() as u64;
                    for c in &fx.commands {
                        if c.cause == CommandCause::Teleop {
                            latencies.push((0.0, elapsed_us));
                            if let Some(h) = c.hand_mm {
                                hand.push(TrajectorySample::new(at, h));
                            }
                            pending_target = Some(c.tip_mm);
                        }
                    }
                }
            }
        }
        if session.phase() == Phase::AwaitValidation
            && session.queued_waypoints() == 0
            && session.sim().at_target()
        {
            if let (Some(move_id), Some(client)) = (
                session.pending_move(),
                session.engaged_client().map(str::to_owned),
            ) {
                let fx = session.handle(Event::Message {
                    client_id: client,
                    msg: WireMessage::Validate {
                        move_id,
                        accepted: true,
                    },
                });
                n_commands += fx.commands.len() as u64;
            }
        }
        let waiting = next < script.events.len()
            && script.events[next].t_ms + offset_ms < clock + dt_ms
            && held(&session, &script.events[next].action);
        let fx = session.handle(Event::Tick);
        n_commands += fx.commands.len() as u64;
        tick += 1;
        let sample = fx.tick.expect("tick reports a sample");
        tip.push(TrajectorySample::new(tick as f64 * dt_ms, sample.tip));
        if let Some(target) = pending_target {
            errors.push((sample.tip - target).norm());
        }
        if session.mode() == Mode::Inserted {
            if let Some(trocar) = session.trocar() {
                let fk = session
                    .model()
                    .forward_kinematics(&sample.q)
                    .expect("simulator state is finite");
                let d =
                    distance_to_line(&trocar.trocar_point, &fk.flange.position, &fk.tip.position);
                max_trocar = max_trocar.max(d);
            }
        }
        if waiting {
            offset_ms += dt_ms;
        }
        if next == script.events.len() && !session.busy() && session.sim().at_target() {
            break;
        }
        if tick >= max_ticks {
            return Err(TaskError::Stalled(tick as f64 * dt_ms / 1000.0));
        }
    }

    let counters = session.counters();
    if counters.gating_violations > 0 {
        return Err(TaskError::ScriptViolation {
            index: next,
            detail: format!("{} ungated wrist messages", counters.gating_violations),
        });
    }
    let (trajectory_rms_mm, aligned) = match trajectory_deviation(&hand, &tip) {
        Ok(d) => (d.rms_mm, d.aligned),
        Err(_) => (0.0, Vec::new()),
    };
    let (mean_error_mm, max_error_mm) = mean_max(&errors);
    let duration_s = task_timer(&markers).unwrap_or(0.0);
    let report = TaskReport {
        report_version: REPORT_VERSION,
        task_id: script.task_id,
        mean_error_mm,
        max_error_mm,
        trajectory_rms_mm,
        latency: latency_stats(&latencies),
        duration_s,
        n_hand_samples: hand.len() as u64,
        n_tip_samples: tip.len() as u64,
        n_commands,
        target_errors_mm: target_errors,
        max_trocar_distance_mm: max_trocar,
        gating_violations: counters.gating_violations,
        ik_skips: counters.ik_skips,
    };
    Ok(ReplayOutput { report, aligned })
}

/// Script events that must wait for the robot: new moves and requests while a move is being
/// validated or a sequence is running, and measurements until the robot has settled.
fn held(session: &Session, action: &Action) -> bool {
    let settling = session.phase() == Phase::AwaitValidation
        || session.queued_waypoints() > 0
        || session.mode() == Mode::Approach;
    match action {
        Action::Connect { .. } => false,
        Action::Marker { .. } | Action::Checkpoint { .. } => settling || !session.sim().at_target(),
        Action::Message { msg, .. } => match msg {
            WireMessage::WristSample { .. } | WireMessage::PinchEnd { .. } => false,
            WireMessage::Insert { .. } => {
                session.phase() == Phase::AwaitValidation || session.mode() == Mode::Approach
            }
            _ => settling,
        },
    }
}
