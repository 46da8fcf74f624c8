#![allow(dead_code)]

pub mod arm;
pub mod wire;

use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::calibration::RigidTransform;
use teleop_core::config::ServerConfig;
use teleop_core::protocol::{InsertDirection, Role, WireMessage};
use teleop_core::session::{CommandCause, Event, Phase, Session};

pub const CLIENTS: [&str; 3] = ["a", "b", "obs"];

/// One fuzz step. Client indices pick from [`CLIENTS`]; the last one is an observer.
#[derive(Clone, Debug)]
pub enum Op {
    Connect(usize),
    Disconnect(usize),
    PinchStart(usize),
    Wrist(usize, [f64; 3]),
    /// Sequence number jumps backwards when `rewind` is set.
    WristRewind(usize),
    PinchEnd(usize),
    /// `true` answers the pending move id, `false` a made-up one.
    Validate(usize, bool, bool),
    Scale(usize, f64),
    Approach(usize),
    Insert(usize, bool),
    Retract(usize),
    Tick(u8),
}

pub fn random_op(rng: &mut ChaCha8Rng) -> Op {
    let c = rng.random_range(0..CLIENTS.len());
    match rng.random_range(0..100) {
        0..=3 => Op::Connect(c),
        4..=5 => Op::Disconnect(c),
        6..=15 => Op::PinchStart(c),
        16..=50 => Op::Wrist(
            c,
            [
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ],
        ),
        51..=52 => Op::WristRewind(c),
        53..=62 => Op::PinchEnd(c),
        63..=72 => Op::Validate(c, rng.random_bool(0.85), rng.random_bool(0.7)),
        73..=75 => Op::Scale(c, rng.random_range(0.0..12.0)),
        76..=77 => Op::Approach(c),
        78..=81 => Op::Insert(c, rng.random_bool(0.7)),
        82 => Op::Retract(c),
        _ => Op::Tick(rng.random_range(1..20)),
    }
}

pub fn random_sequence(seed: u64, len: usize) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| random_op(&mut rng)).collect()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzStats {
    pub events: u64,
    pub teleop_commands: u64,
    pub summaries: u64,
    pub validations: u64,
}

/// Drives a session with `ops` and checks the gating, single-writer and validation
/// invariants after every event.
pub fn run_sequence(ops: &[Op]) -> Result<FuzzStats, String> {
    let mut s = Session::new(&ServerConfig::default(), RigidTransform::identity()).unwrap();
    let mut connected = BTreeSet::new();
    let mut seqs = [0u64; CLIENTS.len()];
    let mut summarized = BTreeSet::new();
    let mut resolved = BTreeSet::new();
    let mut stats = FuzzStats::default();
    let tip = s.model().tip_pose(&s.last_command()).unwrap().position / 1000.0;
    let check_box = |s: &Session| -> Result<(), String> {
        let sim = s.sim();
        if !sim.safety_box().contains(&sim.tip()) {
            return Err(format!("tip left the safety box: {:?}", sim.tip()));
        }
        for (i, p) in sim.planes().iter().enumerate() {
            if !p.contains(sim.q().0[i]) {
                return Err(format!("joint {} left its plane", i + 1));
            }
        }
        Ok(())
    };
    let mut all = ops.to_vec();
    // Close out whatever is pending so every summary gets its answer.
    all.push(Op::Validate(0, true, true));
    all.push(Op::Validate(1, true, true));
    for op in &all {
        let engaged_before = s.engaged_client().map(str::to_owned);
        let phase_before = s.phase();
        let pending_before = s.pending_move();
        let (events, sender): (Vec<Event>, Option<usize>) = match op {
            Op::Connect(c) => {
                let role = if *c == 2 {
                    Role::Observer
                } else {
                    Role::Operator
                };
                (
                    vec![Event::Connect {
                        client_id: CLIENTS[*c].into(),
                        role,
                    }],
                    None,
                )
            }
            Op::Disconnect(c) => (
                vec![Event::Disconnect {
                    client_id: CLIENTS[*c].into(),
                }],
                None,
            ),
            Op::Tick(n) => ((0..*n).map(|_| Event::Tick).collect(), None),
            other => {
                let (c, msg) = match other {
                    Op::PinchStart(c) => (*c, WireMessage::PinchStart { t_client_ms: 0 }),
                    Op::Wrist(c, d) => {
                        seqs[*c] += 1;
                        (
                            *c,
                            WireMessage::WristSample {
                                seq: seqs[*c],
                                t_client_ms: 0,
                                x_m: tip.x + d[0],
                                y_m: tip.y + d[1],
                                z_m: tip.z + d[2],
                            },
                        )
                    }
                    Op::WristRewind(c) => (
                        *c,
                        WireMessage::WristSample {
                            seq: seqs[*c].saturating_sub(1),
                            t_client_ms: 0,
                            x_m: tip.x,
                            y_m: tip.y,
                            z_m: tip.z,
                        },
                    ),
                    Op::PinchEnd(c) => (
                        *c,
                        WireMessage::PinchEnd {
                            t_client_ms: 0,
                            last_seq: seqs[*c],
                        },
                    ),
                    Op::Validate(c, current, accepted) => {
                        let id = match (current, s.pending_move()) {
                            (true, Some(id)) => id,
                            _ => 10_000,
                        };
                        let c = if *current {
                            CLIENTS
                                .iter()
                                .position(|n| Some(*n) == s.engaged_client())
                                .unwrap_or(*c)
                        } else {
                            *c
                        };
                        (
                            c,
                            WireMessage::Validate {
                                move_id: id,
                                accepted: *accepted,
                            },
                        )
                    }
                    Op::Scale(c, v) => (
                        *c,
                        WireMessage::ConfigSet {
                            scale: Some(*v),
                            insert_increment_mm: None,
                            insert_velocity_mm_s: None,
                        },
                    ),
                    Op::Approach(c) => {
                        let p = s.model().tip_pose(&s.last_command()).unwrap().position;
                        (
                            *c,
                            WireMessage::Approach {
                                trocar_mm: (p + Vector3::new(5.0, 0.0, -40.0)).into(),
                                axis: Some([0.0, 0.0, -1.0]),
                            },
                        )
                    }
                    Op::Insert(c, inward) => (
                        *c,
                        WireMessage::Insert {
                            direction: if *inward {
                                InsertDirection::In
                            } else {
                                InsertDirection::Out
                            },
                        },
                    ),
                    Op::Retract(c) => (*c, WireMessage::Retract {}),
                    _ => unreachable!(),
                };
                (
                    vec![Event::Message {
                        client_id: CLIENTS[c].into(),
                        msg,
                    }],
                    Some(c),
                )
            }
        };
        match op {
            Op::Connect(c) => {
                connected.insert(*c);
            }
            Op::Disconnect(c) => {
                connected.remove(c);
                seqs[*c] = seqs[*c].max(1);
            }
            _ => {}
        }
        let is_wrist = matches!(op, Op::Wrist(..) | Op::WristRewind(..));
        let is_reject = matches!(op, Op::Validate(_, _, false));
        for ev in events {
            let is_tick = ev == Event::Tick;
            let fx = s.handle(ev);
            stats.events += 1;
            for c in &fx.commands {
                match c.cause {
                    CommandCause::Teleop => {
                        stats.teleop_commands += 1;
                        if !is_wrist
                            || phase_before != Phase::Engaged
                            || s.phase() != Phase::Engaged
                        {
                            return Err(format!("teleop command outside an engagement ({op:?})"));
                        }
                        let from = sender.map(|i| CLIENTS[i].to_string());
                        if from != engaged_before || from.as_deref() != s.engaged_client() {
                            return Err(format!("command from non-engaged client ({op:?})"));
                        }
                    }
                    CommandCause::Homing if !(is_reject || is_tick) => {
                        return Err(format!("homing without a rejection ({op:?})"));
                    }
                    CommandCause::Approach | CommandCause::Insert if !is_tick => {
                        return Err(format!("sequence command outside a tick ({op:?})"));
                    }
                    _ => {}
                }
            }
            for r in &fx.replies {
                if let WireMessage::MoveSummary { move_id, .. } = r.msg {
                    stats.summaries += 1;
                    if !summarized.insert(move_id) {
                        return Err(format!("move {move_id} summarized twice"));
                    }
                }
            }
            if is_tick {
                check_box(&s)?;
            }
        }
        if let (Some(id), None, Op::Validate(..)) = (pending_before, s.pending_move(), op) {
            stats.validations += 1;
            if !summarized.contains(&id) || !resolved.insert(id) {
                return Err(format!("move {id} validated without summary or twice"));
            }
        }
        let anchored = s.anchor_joints().is_some();
        let in_move = matches!(s.phase(), Phase::Engaged | Phase::AwaitValidation);
        if anchored != in_move {
            return Err(format!(
                "anchor presence {anchored} in phase {:?}",
                s.phase()
            ));
        }
        if let Some(e) = s.engaged_client() {
            if !connected.iter().any(|c| CLIENTS[*c] == e) || e == CLIENTS[2] {
                return Err(format!("engaged client {e} not a connected operator"));
            }
        }
        if s.phase() == Phase::AwaitValidation && s.pending_move().is_none() {
            return Err("awaiting validation without a pending move".into());
        }
    }
    // Summaries may only go unanswered when their client vanished.
    for id in &summarized {
        if !resolved.contains(id) && s.pending_move() == Some(*id) {
            return Err(format!("move {id} left pending"));
        }
    }
    Ok(stats)
}
