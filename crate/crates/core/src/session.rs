//! Teleoperation state machine: pinch gating, the operator-to-robot motion pipeline,
//! trocar approach and insertion, and move validation.
//!
//! The session consumes one totally ordered stream of [`Event`]s and is the only writer of
//! robot targets. Every handler runs to completion and returns the resulting [`Effects`].

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::calibration::{meters_to_millimeters, RigidTransform};
use crate::config::{validate_scale, ConfigError, ServerConfig, SessionSettings};
use crate::kinematics::{inverse_kinematics, ArmModel, IkOptions, JointVector, Pose};
use crate::protocol::{
    ErrorCode, GateVerdict, InsertDirection, Mode, PinchGate, Role, WireMessage,
};
use crate::robot_sim::{RobotSim, SimError, SimSample};
use crate::trocar::{align_z, rcm_constrain, TrocarError, TrocarState};

/// Seconds a queued waypoint may stay unreached before the sequence is abandoned.
const WAYPOINT_STALL_S: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AwaitHello,
    Idle,
    Engaged,
    AwaitValidation,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    /// A connection completed its handshake.
    Connect {
        client_id: String,
        role: Role,
    },
    Disconnect {
        client_id: String,
    },
    Message {
        client_id: String,
        msg: WireMessage,
    },
    Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Recipient {
    Client(String),
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub to: Recipient,
    pub msg: WireMessage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandCause {
    Teleop,
    Approach,
    Insert,
    Homing,
}

/// A joint target handed to the simulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Command {
    pub q: JointVector<f64>,
    /// Tip position the command was solved for (mm).
    pub tip_mm: Vector3<f64>,
    /// Scaled operator point in the robot frame, before any mode constraint (teleop only).
    pub hand_mm: Option<Vector3<f64>>,
    pub cause: CommandCause,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Effects {
    pub replies: Vec<Reply>,
    pub commands: Vec<Command>,
    /// Clients whose connection must be closed after their replies are flushed.
    pub close: Vec<String>,
    /// Simulator state after a tick.
    pub tick: Option<SimSample>,
}

impl Effects {
    fn to(&mut self, client: &str, msg: WireMessage) {
        self.replies.push(Reply {
            to: Recipient::Client(client.to_owned()),
            msg,
        });
    }

    fn all(&mut self, msg: WireMessage) {
        self.replies.push(Reply {
            to: Recipient::All,
            msg,
        });
    }

    fn error(&mut self, client: &str, code: ErrorCode, detail: impl Into<String>) {
        self.to(client, WireMessage::error(code, detail));
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Wrist or pinch messages dropped because they were not gated by an engagement.
    pub gating_violations: u64,
    pub ik_skips: u64,
    pub rejected_commands: u64,
    pub busy_rejections: u64,
    pub moves_accepted: u64,
    pub moves_rejected: u64,
}

#[derive(Clone, Debug)]
struct Anchor {
    joints: JointVector<f64>,
    pose: Pose<f64>,
    /// Transformed operator point of the first sample of the pinch.
    operator_mm: Option<Vector3<f64>>,
    trocar: Option<TrocarState<f64>>,
    /// Joint commands issued during this pinch, oldest first.
    history: Vec<JointVector<f64>>,
    n_samples: u64,
}

/// A precomputed joint target released to the simulator once the previous one is reached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waypoint {
    pub q: JointVector<f64>,
    pub tip_mm: Vector3<f64>,
    pub cause: CommandCause,
}

#[derive(Clone, Debug)]
struct Client {
    role: Role,
    gate: PinchGate,
}

#[derive(Clone, Debug)]
pub struct Session {
    sim: RobotSim,
    calibration: RigidTransform<f64>,
    settings: SessionSettings,
    ik: IkOptions<f64>,
    clients: BTreeMap<String, Client>,
    connections: u64,
    phase: Phase,
    mode: Mode,
    engaged: Option<String>,
    anchor: Option<Anchor>,
    pending_move: Option<u64>,
    next_move_id: u64,
    last_command: JointVector<f64>,
    consecutive_skips: u32,
    trocar: Option<TrocarState<f64>>,
    approach_trocar: Option<TrocarState<f64>>,
    queue: VecDeque<Waypoint>,
    stall_ticks: u64,
    counters: Counters,
}

impl Session {
    pub fn new(
        config: &ServerConfig,
        calibration: RigidTransform<f64>,
    ) -> Result<Self, SessionError> {
        config.validate()?;
        let sim = RobotSim::new(config.model()?, &config.sim_config(), config.home())?;
        Ok(Self::with_sim(sim, calibration, config.session))
    }

    pub fn with_sim(
        sim: RobotSim,
        calibration: RigidTransform<f64>,
        settings: SessionSettings,
    ) -> Self {
        let last_command = sim.target();
        Self {
            sim,
            calibration,
            settings,
            ik: IkOptions::default(),
            clients: BTreeMap::new(),
            connections: 0,
            phase: Phase::AwaitHello,
            mode: Mode::FreeSpace,
            engaged: None,
            anchor: None,
            pending_move: None,
            next_move_id: 1,
            last_command,
            consecutive_skips: 0,
            trocar: None,
            approach_trocar: None,
            queue: VecDeque::new(),
            stall_ticks: 0,
            counters: Counters::default(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn engaged_client(&self) -> Option<&str> {
        self.engaged.as_deref()
    }

    pub fn sim(&self) -> &RobotSim {
        &self.sim
    }

    pub fn model(&self) -> &ArmModel<f64> {
        self.sim.model()
    }

    pub fn settings(&self) -> &SessionSettings {
        &self.settings
    }

    pub fn calibration(&self) -> &RigidTransform<f64> {
        &self.calibration
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn trocar(&self) -> Option<&TrocarState<f64>> {
        self.trocar.as_ref()
    }

    pub fn pending_move(&self) -> Option<u64> {
        self.pending_move
    }

    pub fn last_command(&self) -> JointVector<f64> {
        self.last_command
    }

    /// Joints captured when the current engagement started.
    pub fn anchor_joints(&self) -> Option<JointVector<f64>> {
        self.anchor.as_ref().map(|a| a.joints)
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Waypoints still to be sent to the simulator.
    pub fn queued_waypoints(&self) -> usize {
        self.queue.len()
    }

    /// True while a move, its validation, or a scripted sequence is in progress.
    pub fn busy(&self) -> bool {
        matches!(self.phase, Phase::Engaged | Phase::AwaitValidation)
            || !self.queue.is_empty()
            || self.mode == Mode::Approach
    }

    pub fn state_message(&self) -> WireMessage {
        let s = self.sim.sample();
        WireMessage::StateBroadcast {
            tick: s.tick,
            joints_rad: s.q.to_array(),
            tip_mm: s.tip.into(),
            mode: self.mode,
            engaged_client: self.engaged.clone(),
        }
    }

    pub fn handle(&mut self, event: Event) -> Effects {
        let mut fx = Effects::default();
        match event {
            Event::Connect { client_id, role } => self.on_connect(client_id, role, &mut fx),
            Event::Disconnect { client_id } => self.on_disconnect(&client_id),
            Event::Message { client_id, msg } => self.on_message(&client_id, msg, &mut fx),
            Event::Tick => self.on_tick(&mut fx),
        }
        fx
    }

    fn on_connect(&mut self, client_id: String, role: Role, fx: &mut Effects) {
        if self.clients.contains_key(&client_id) {
            fx.error(
                &client_id,
                ErrorCode::ProtocolViolation,
                format!("client id {client_id} is already connected"),
            );
            fx.close.push(client_id);
            return;
        }
        self.connections += 1;
        fx.to(
            &client_id,
            WireMessage::HelloAck {
                session_id: format!("{client_id}-{}", self.connections),
                server_version: crate::protocol::SERVER_VERSION.to_owned(),
            },
        );
        self.clients.insert(
            client_id,
            Client {
                role,
                gate: PinchGate::default(),
            },
        );
        if self.phase == Phase::AwaitHello {
            self.phase = Phase::Idle;
        }
    }

    fn on_disconnect(&mut self, client_id: &str) {
        if self.clients.remove(client_id).is_none() {
            return;
        }
        if self.engaged.as_deref() == Some(client_id) {
            // Keep whatever was commanded so far; no further motion from this client.
            self.finish_move();
        }
        if self.clients.is_empty() && self.phase == Phase::Idle {
            self.phase = Phase::AwaitHello;
        }
    }

    fn on_message(&mut self, client_id: &str, msg: WireMessage, fx: &mut Effects) {
        let Some(client) = self.clients.get_mut(client_id) else {
            return;
        };
        let role = client.role;
        match &msg {
            WireMessage::PinchStart { .. }
            | WireMessage::WristSample { .. }
            | WireMessage::PinchEnd { .. } => {
                if let GateVerdict::Violation(detail) = client.gate.check(&msg) {
                    self.counters.gating_violations += 1;
                    fx.error(client_id, ErrorCode::GatingViolation, detail);
                    return;
                }
            }
            _ => {}
        }
        let controls = !matches!(
            msg,
            WireMessage::Hello { .. }
                | WireMessage::HelloAck { .. }
                | WireMessage::MoveSummary { .. }
                | WireMessage::StateBroadcast { .. }
                | WireMessage::Error { .. }
        );
        if controls && role == Role::Observer {
            if matches!(
                msg,
                WireMessage::WristSample { .. } | WireMessage::PinchStart { .. }
            ) {
                self.counters.gating_violations += 1;
            }
            if !matches!(msg, WireMessage::WristSample { .. }) {
                fx.error(
                    client_id,
                    ErrorCode::NotEngaged,
                    "observers cannot control the robot",
                );
            }
            return;
        }
        match msg {
            WireMessage::PinchStart { .. } => self.on_pinch_start(client_id, fx),
            WireMessage::WristSample { x_m, y_m, z_m, .. } => {
                self.on_wrist(client_id, Vector3::new(x_m, y_m, z_m), fx)
            }
            WireMessage::PinchEnd { .. } => self.on_pinch_end(client_id, fx),
            WireMessage::Validate { move_id, accepted } => {
                self.on_validate(client_id, move_id, accepted, fx)
            }
            WireMessage::ConfigSet {
                scale,
                insert_increment_mm,
                insert_velocity_mm_s,
            } => self.on_config(
                client_id,
                scale,
                insert_increment_mm,
                insert_velocity_mm_s,
                fx,
            ),
            WireMessage::Approach { trocar_mm, axis } => {
                self.on_approach(client_id, trocar_mm.into(), axis.map(Vector3::from), fx)
            }
            WireMessage::Insert { direction } => self.on_insert(client_id, direction, fx),
            WireMessage::Retract {} => self.on_retract(client_id, fx),
            WireMessage::Error { .. } => {}
            other => fx.error(
                client_id,
                ErrorCode::ProtocolViolation,
                format!("{} is not accepted from clients", other.type_name()),
            ),
        }
    }

    fn on_pinch_start(&mut self, client_id: &str, fx: &mut Effects) {
        if self.busy() {
            self.counters.busy_rejections += 1;
            let detail = match &self.engaged {
                Some(other) if other != client_id => format!("robot engaged by {other}"),
                Some(_) => "previous move not validated".to_owned(),
                None => "robot executing a sequence".to_owned(),
            };
            fx.error(client_id, ErrorCode::Busy, detail);
            return;
        }
        let pose = self.commanded_pose();
        self.phase = Phase::Engaged;
        self.engaged = Some(client_id.to_owned());
        self.consecutive_skips = 0;
        self.anchor = Some(Anchor {
            joints: self.last_command,
            pose,
            operator_mm: None,
            trocar: self.trocar,
            history: Vec::new(),
            n_samples: 0,
        });
    }

    fn on_wrist(&mut self, client_id: &str, operator_m: Vector3<f64>, fx: &mut Effects) {
        if self.phase != Phase::Engaged || self.engaged.as_deref() != Some(client_id) {
            self.counters.gating_violations += 1;
            return;
        }
        let p = self.calibration.apply(&meters_to_millimeters(&operator_m));
        let scale = self.settings.scale;
        let anchor = self.anchor.as_mut().expect("anchor set while engaged");
        anchor.n_samples += 1;
        let origin = *anchor.operator_mm.get_or_insert(p);
        let desired = anchor.pose.position + (p - origin) * scale;
        match self.teleop_target(&desired) {
            Ok((pose, trocar)) => match self.solve(&pose, &self.last_command) {
                Ok(q) => match self.sim.submit_target(q) {
                    Ok(()) => {
                        self.last_command = q;
                        self.consecutive_skips = 0;
                        if trocar.is_some() {
                            self.trocar = trocar;
                        }
                        if let Some(anchor) = self.anchor.as_mut() {
                            anchor.history.push(q);
                        }
                        fx.commands.push(Command {
                            q,
                            tip_mm: pose.position,
                            hand_mm: Some(desired),
                            cause: CommandCause::Teleop,
                        });
                    }
                    Err(e) => {
                        self.counters.rejected_commands += 1;
                        self.skip(client_id, ErrorCode::CommandRejected, e.to_string(), fx);
                    }
                },
                Err(detail) => self.skip(client_id, ErrorCode::IkFailure, detail, fx),
            },
            Err(e) => self.skip(client_id, ErrorCode::DegenerateDirection, e.to_string(), fx),
        }
    }

    fn skip(&mut self, client_id: &str, code: ErrorCode, detail: String, fx: &mut Effects) {
        self.counters.ik_skips += 1;
        self.consecutive_skips += 1;
        if self
            .consecutive_skips
            .is_multiple_of(self.settings.ik_skip_limit)
        {
            fx.error(
                client_id,
                code,
                format!(
                    "{} consecutive samples skipped: {detail}",
                    self.consecutive_skips
                ),
            );
        }
    }

    /// Applies the mode constraint to a desired tip position.
    fn teleop_target(
        &self,
        desired: &Vector3<f64>,
    ) -> Result<(Pose<f64>, Option<TrocarState<f64>>), TrocarError> {
        let anchor = self.anchor.as_ref().expect("anchor set while engaged");
        match (self.mode, self.trocar.as_ref()) {
            (Mode::Inserted, Some(trocar)) => {
                let mut st = rcm_constrain(trocar, desired)?;
                st.depth = st.depth.min(self.settings.max_depth_mm);
                let orientation = align_z(&anchor.pose.orientation, &st.direction());
                Ok((Pose::new(st.tip(), orientation), Some(st)))
            }
            _ => Ok((Pose::new(*desired, anchor.pose.orientation), None)),
        }
    }

    fn solve(&self, pose: &Pose<f64>, seed: &JointVector<f64>) -> Result<JointVector<f64>, String> {
        inverse_kinematics(self.model(), pose, seed, &self.ik)
            .map(|sol| sol.q)
            .map_err(|e| e.to_string())
    }

    fn commanded_pose(&self) -> Pose<f64> {
        self.model()
            .tip_pose(&self.last_command)
            .expect("commanded joints are finite")
    }

    fn on_pinch_end(&mut self, client_id: &str, fx: &mut Effects) {
        if self.phase != Phase::Engaged || self.engaged.as_deref() != Some(client_id) {
            return;
        }
        let anchor = self.anchor.as_ref().expect("anchor set while engaged");
        let move_id = self.next_move_id;
        self.next_move_id += 1;
        self.pending_move = Some(move_id);
        self.phase = Phase::AwaitValidation;
        let tip_end = self.commanded_pose().position;
        fx.all(WireMessage::MoveSummary {
            move_id,
            n_samples: anchor.n_samples,
            tip_start_mm: anchor.pose.position.into(),
            tip_end_mm: tip_end.into(),
        });
    }

    fn on_validate(&mut self, client_id: &str, move_id: u64, accepted: bool, fx: &mut Effects) {
        if self.phase != Phase::AwaitValidation || self.pending_move != Some(move_id) {
            fx.error(
                client_id,
                ErrorCode::StaleValidation,
                format!("move {move_id} is not awaiting validation"),
            );
            return;
        }
        if self.engaged.as_deref() != Some(client_id) {
            fx.error(
                client_id,
                ErrorCode::NotEngaged,
                "only the engaged client may validate",
            );
            return;
        }
        if accepted {
            self.counters.moves_accepted += 1;
        } else {
            self.counters.moves_rejected += 1;
            self.home_to_anchor(fx);
        }
        self.finish_move();
    }

    fn home_to_anchor(&mut self, fx: &mut Effects) {
        let anchor = self
            .anchor
            .take()
            .expect("anchor set while awaiting validation");
        let tip = anchor.pose.position;
        if self.mode == Mode::Inserted {
            // Retrace the pinch's own commands so the shaft never leaves the port.
            let mut path: Vec<_> = anchor.history.iter().rev().skip(1).copied().collect();
            path.push(anchor.joints);
            for q in path {
                let tip_mm = self.model().tip_pose(&q).map(|p| p.position).unwrap_or(tip);
                self.queue.push_back(Waypoint {
                    q,
                    tip_mm,
                    cause: CommandCause::Homing,
                });
            }
            self.trocar = anchor.trocar;
            self.stall_ticks = 0;
            self.last_command = anchor.joints;
            return;
        }
        match self.sim.submit_target(anchor.joints) {
            Ok(()) => {
                self.last_command = anchor.joints;
                fx.commands.push(Command {
                    q: anchor.joints,
                    tip_mm: tip,
                    hand_mm: None,
                    cause: CommandCause::Homing,
                });
            }
            Err(e) => {
                self.counters.rejected_commands += 1;
                fx.all(WireMessage::error(
                    ErrorCode::CommandRejected,
                    e.to_string(),
                ));
            }
        }
    }

    fn finish_move(&mut self) {
        self.phase = if self.clients.is_empty() {
            Phase::AwaitHello
        } else {
            Phase::Idle
        };
        self.engaged = None;
        self.anchor = None;
        self.pending_move = None;
        self.consecutive_skips = 0;
    }

    fn on_config(
        &mut self,
        client_id: &str,
        scale: Option<f64>,
        increment: Option<f64>,
        velocity: Option<f64>,
        fx: &mut Effects,
    ) {
        if matches!(self.phase, Phase::Engaged | Phase::AwaitValidation) {
            fx.error(
                client_id,
                ErrorCode::Busy,
                "settings are locked during a move",
            );
            return;
        }
        let mut next = self.settings;
        if let Some(s) = scale {
            next.scale = s;
        }
        if let Some(i) = increment {
            next.insert_increment_mm = i;
        }
        if let Some(v) = velocity {
            next.insert_velocity_mm_s = v;
        }
        let checked = validate_scale(next.scale).and_then(|_| next.validate());
        match checked {
            Ok(()) => self.settings = next,
            Err(e) => fx.error(client_id, ErrorCode::InvalidConfig, e.to_string()),
        }
    }

    fn ensure_free(&mut self, client_id: &str, fx: &mut Effects) -> bool {
        if self.busy() {
            self.counters.busy_rejections += 1;
            fx.error(client_id, ErrorCode::Busy, "robot busy");
            false
        } else {
            true
        }
    }

    fn on_approach(
        &mut self,
        client_id: &str,
        trocar: Vector3<f64>,
        axis: Option<Vector3<f64>>,
        fx: &mut Effects,
    ) {
        if self.mode != Mode::FreeSpace {
            fx.error(
                client_id,
                ErrorCode::InvalidMode,
                "approach requires free-space mode",
            );
            return;
        }
        if !self.ensure_free(client_id, fx) {
            return;
        }
        match self.plan_approach(&trocar, axis) {
            Ok((waypoints, target)) => {
                if waypoints.is_empty() {
                    self.enter_inserted(target);
                } else {
                    self.mode = Mode::Approach;
                    self.approach_trocar = Some(target);
                    self.last_command = waypoints.last().expect("non-empty").q;
                    self.queue.extend(waypoints);
                    self.stall_ticks = 0;
                }
            }
            Err((code, detail)) => fx.error(client_id, code, detail),
        }
    }

    /// Straight-line tip path from the current pose to the standoff point, with the camera
    /// axis turned onto the insertion direction along the way.
    pub fn plan_approach(
        &self,
        trocar: &Vector3<f64>,
        axis: Option<Vector3<f64>>,
    ) -> Result<(Vec<Waypoint>, TrocarState<f64>), (ErrorCode, String)> {
        let start = self.commanded_pose();
        let u = axis.unwrap_or_else(|| start.z_axis());
        if !trocar.iter().chain(u.iter()).all(|v| v.is_finite()) {
            return Err((ErrorCode::NonFinite, "non-finite approach request".into()));
        }
        if u.norm() < 1e-9 {
            return Err((ErrorCode::DegenerateDirection, "zero approach axis".into()));
        }
        let u = u.normalize();
        let standoff = trocar - u * self.settings.standoff_mm;
        let target = TrocarState::from_direction(standoff, &u, 0.0)
            .map_err(|e| (ErrorCode::DegenerateDirection, e.to_string()))?;
        if !self.sim.safety_box().contains(&standoff) {
            return Err((
                ErrorCode::Unreachable,
                "standoff point lies outside the safety box".into(),
            ));
        }
        let end_orientation = align_z(&start.orientation, &u);
        let distance = (standoff - start.position).norm();
        let angle = start.orientation.angle_to(&end_orientation);
        if distance <= self.ik.pos_tol && angle <= self.ik.ori_tol {
            return Ok((Vec::new(), target));
        }
        let n = ((distance / self.settings.waypoint_spacing_mm).ceil())
            .max((angle / self.settings.waypoint_rotation_rad).ceil())
            .max(1.0) as usize;
        let mut seed = self.last_command;
        let mut out = Vec::with_capacity(n);
        for k in 1..=n {
            let s = k as f64 / n as f64;
            let pose = Pose::new(
                start.position + (standoff - start.position) * s,
                slerp(&start.orientation, &end_orientation, s),
            );
            let q = self.solve(&pose, &seed).map_err(|e| {
                (
                    ErrorCode::Unreachable,
                    format!("approach waypoint {k}/{n} unreachable: {e}"),
                )
            })?;
            out.push(Waypoint {
                q,
                tip_mm: pose.position,
                cause: CommandCause::Approach,
            });
            seed = q;
        }
        Ok((out, target))
    }

    fn enter_inserted(&mut self, trocar: TrocarState<f64>) {
        self.mode = Mode::Inserted;
        self.trocar = Some(trocar);
        self.approach_trocar = None;
    }

    fn on_insert(&mut self, client_id: &str, direction: InsertDirection, fx: &mut Effects) {
        let Some(trocar) = self.trocar.filter(|_| self.mode == Mode::Inserted) else {
            fx.error(
                client_id,
                ErrorCode::InvalidMode,
                "insertion requires trocar mode",
            );
            return;
        };
        if matches!(self.phase, Phase::Engaged | Phase::AwaitValidation) {
            self.counters.busy_rejections += 1;
            fx.error(client_id, ErrorCode::Busy, "robot engaged");
            return;
        }
        let step = match direction {
            InsertDirection::In => self.settings.insert_increment_mm,
            InsertDirection::Out => -self.settings.insert_increment_mm,
        };
        let from = trocar.depth;
        let to = (from + step).clamp(0.0, self.settings.max_depth_mm);
        if to == from {
            fx.error(
                client_id,
                ErrorCode::DepthLimit,
                format!("insertion depth already at {from} mm"),
            );
            return;
        }
        match self.plan_insertion(&trocar, to) {
            Ok(waypoints) => {
                self.last_command = waypoints.last().expect("non-empty").q;
                if self.queue.is_empty() {
                    self.stall_ticks = 0;
                }
                self.queue.extend(waypoints);
                self.trocar = Some(trocar.with_depth(to));
            }
            Err(detail) => fx.error(client_id, ErrorCode::Unreachable, detail),
        }
    }

    /// Waypoints along the shaft at the configured insertion speed, one per tick.
    pub fn plan_insertion(
        &self,
        trocar: &TrocarState<f64>,
        to: f64,
    ) -> Result<Vec<Waypoint>, String> {
        let per_tick = self.settings.insert_velocity_mm_s / self.sim.tick_rate_hz();
        let delta = to - trocar.depth;
        let n = (delta.abs() / per_tick).ceil().max(1.0) as usize;
        let orientation = align_z(&self.commanded_pose().orientation, &trocar.direction());
        let mut seed = self.last_command;
        let mut out = Vec::with_capacity(n);
        for k in 1..=n {
            let d = trocar.depth + delta * (k as f64 / n as f64);
            let tip = trocar.with_depth(d).tip();
            let q = self
                .solve(&Pose::new(tip, orientation), &seed)
                .map_err(|e| format!("insertion to {d:.3} mm unreachable: {e}"))?;
            out.push(Waypoint {
                q,
                tip_mm: tip,
                cause: CommandCause::Insert,
            });
            seed = q;
        }
        Ok(out)
    }

    fn on_retract(&mut self, client_id: &str, fx: &mut Effects) {
        if self.mode != Mode::Inserted {
            fx.error(client_id, ErrorCode::InvalidMode, "not in trocar mode");
            return;
        }
        if !self.ensure_free(client_id, fx) {
            return;
        }
        if self.trocar.is_some_and(|t| t.depth > 0.0) {
            fx.error(
                client_id,
                ErrorCode::DepthLimit,
                "withdraw the camera before leaving the port",
            );
            return;
        }
        self.mode = Mode::FreeSpace;
        self.trocar = None;
    }

    fn on_tick(&mut self, fx: &mut Effects) {
        self.advance_queue(fx);
        let sample = self.sim.step();
        if self.mode == Mode::Approach && self.queue.is_empty() && self.sim.at_target() {
            if let Some(target) = self.approach_trocar {
                self.enter_inserted(target);
            }
        }
        fx.tick = Some(sample);
        fx.all(self.state_message());
    }

    fn advance_queue(&mut self, fx: &mut Effects) {
        if self.queue.is_empty() {
            return;
        }
        if !self.sim.at_target() {
            self.stall_ticks += 1;
            if self.stall_ticks as f64 > WAYPOINT_STALL_S * self.sim.tick_rate_hz() {
                self.abort_queue("waypoint not reached; sequence abandoned".into(), fx);
            }
            return;
        }
        let wp = self.queue.pop_front().expect("non-empty");
        self.stall_ticks = 0;
        match self.sim.submit_target(wp.q) {
            Ok(()) => fx.commands.push(Command {
                q: wp.q,
                tip_mm: wp.tip_mm,
                hand_mm: None,
                cause: wp.cause,
            }),
            Err(e) => {
                self.counters.rejected_commands += 1;
                self.abort_queue(e.to_string(), fx);
            }
        }
    }

    fn abort_queue(&mut self, detail: String, fx: &mut Effects) {
        self.queue.clear();
        self.last_command = self.sim.q();
        let _ = self.sim.submit_target(self.last_command);
        if self.mode == Mode::Approach {
            self.mode = Mode::FreeSpace;
            self.approach_trocar = None;
        }
        fx.all(WireMessage::error(ErrorCode::CommandRejected, detail));
    }
}

fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    a.try_slerp(b, s, 1e-12).unwrap_or(*b)
}
