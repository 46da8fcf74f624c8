mod common;

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::calibration::{register_frames, CalibrationError, RigidTransform};
use teleop_core::config::ServerConfig;
use teleop_core::kinematics::{
    inverse_kinematics, orientation_error, ArmDescription, ArmModel, IkOptions, Pose, DOF,
};
use teleop_core::metrics::latency_stats;
use teleop_core::protocol::{decode, encode, Role, WireMessage};
use teleop_core::session::{Event, Session};
use teleop_core::tasks::{gen_task, replay, ReplayOptions, ReplayOutput};

use common::arm::{random_q, reachable_target};
use common::{random_sequence, run_sequence, FuzzStats, Op};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed_replay(task: u8) -> (ReplayOutput, f64) {
    let script = gen_task(task, 1).expect("task generates");
    let start = Instant::now();
    let out = replay(&script, ReplayOptions::default()).expect("replay succeeds");
    (out, start.elapsed().as_secs_f64())
}

fn task_one() -> Outcome {
    let (out, secs) = timed_replay(1);
    let r = &out.report;
    check(
        r.mean_error_mm <= 0.7 && r.max_error_mm <= 1.5 && secs < 10.0 && r.n_commands > 0,
        format!(
            "mean {:.4} mm (<= 0.7), max {:.4} mm (<= 1.5), runtime {secs:.2} s (< 10), {} commands",
            r.mean_error_mm, r.max_error_mm, r.n_commands
        ),
    )
}

fn task_two() -> Outcome {
    let (out, secs) = timed_replay(2);
    let r = &out.report;
    let worst = r.target_errors_mm.iter().cloned().fold(0.0, f64::max);
    check(
        r.target_errors_mm.len() == 3
            && worst <= 1.0
            && r.max_trocar_distance_mm < 0.5
            && secs < 15.0,
        format!(
            "{} targets, worst {worst:.4} mm (<= 1.0), shaft-to-trocar max {:.2e} mm (< 0.5), runtime {secs:.2} s (< 15)",
            r.target_errors_mm.len(),
            r.max_trocar_distance_mm
        ),
    )
}

fn task_three() -> Outcome {
    let (out, _) = timed_replay(3);
    let r = &out.report;
    check(
        r.trajectory_rms_mm <= 2.0 && !out.aligned.is_empty(),
        format!(
            "trajectory RMS {:.4} mm (<= 2.0) over {} aligned samples",
            r.trajectory_rms_mm,
            out.aligned.len()
        ),
    )
}

/// Wall-clock decode-to-enqueue time for a long engaged drag.
fn latency() -> Outcome {
    let mut s = Session::new(&ServerConfig::default(), RigidTransform::identity()).unwrap();
    let id = "op".to_string();
    s.handle(Event::Connect {
        client_id: id.clone(),
        role: Role::Operator,
    });
    s.handle(Event::Message {
        client_id: id.clone(),
        msg: WireMessage::PinchStart { t_client_ms: 0 },
    });
    let home = s.sim().tip() / 1000.0;
    let clock = Instant::now();
    let mut queue = VecDeque::new();
    let mut pairs = Vec::new();
    let n = 12_000u64;
    for seq in 1..=n {
        let phase = seq as f64 / 600.0 * std::f64::consts::TAU;
        let bytes = encode(&WireMessage::WristSample {
            seq,
            t_client_ms: seq * 16,
            x_m: home.x + 0.03 * phase.cos() - 0.03,
            y_m: home.y + 0.03 * phase.sin(),
            z_m: home.z + 0.01 * (0.5 * phase).sin(),
        })
        .unwrap();
        let recv = clock.elapsed().as_secs_f64() * 1e6;
        let msg = decode(&bytes).unwrap();
        let fx = s.handle(Event::Message {
            client_id: id.clone(),
            msg,
        });
        let produced = !fx.commands.is_empty();
        queue.extend(fx.commands);
        let cmd = clock.elapsed().as_secs_f64() * 1e6;
        if produced {
            pairs.push((recv, cmd));
        }
        s.handle(Event::Tick);
        queue.clear();
    }
    let stats = latency_stats(&pairs);
    check(
        stats.n >= 10_000 && stats.median_us <= 1000.0,
        format!(
            "median {:.1} us (<= 1000), p95 {:.1} us, max {:.1} us over {} samples (>= 10000)",
            stats.median_us, stats.p95_us, stats.max_us, stats.n
        ),
    )
}

fn kinematics() -> Outcome {
    let m: ArmModel<f64> = ArmDescription::default().to_model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-6;
    let mut fd_worst = 0.0f64;
    for _ in 0..200 {
        let q = random_q(&mut rng, &m);
        let jac = m.jacobian(&q).unwrap();
        let base = m.tip_pose(&q).unwrap();
        for j in 0..DOF {
            let (mut qp, mut qm) = (q, q);
            qp.0[j] += h;
            qm.0[j] -= h;
            let (tp, tm) = (m.tip_pose(&qp).unwrap(), m.tip_pose(&qm).unwrap());
            let lin = (tp.position - tm.position) / (2.0 * h);
            let ang = (orientation_error(&tp.orientation, &base.orientation)
                - orientation_error(&tm.orientation, &base.orientation))
                / (2.0 * h);
            for r in 0..3 {
                fd_worst = fd_worst
                    .max((jac[(r, j)] - lin[r]).abs())
                    .max((jac[(r + 3, j)] - ang[r]).abs());
            }
        }
    }

    let opts = IkOptions::default();
    let trials = 1000;
    let mut converged = 0;
    let mut outside = 0;
    let mut worst_tip = 0.0f64;
    for _ in 0..trials {
        let q = random_q(&mut rng, &m);
        let target = reachable_target(&mut rng, &m, &q, 20.0);
        if let Ok(sol) = inverse_kinematics(&m, &target, &q, &opts) {
            let err = (m.tip_pose(&sol.q).unwrap().position - target.position).norm();
            worst_tip = worst_tip.max(err);
            outside += usize::from(!m.within_limits(&sol.q));
            converged += usize::from(err < 1e-3);
        }
    }
    // Arbitrary poses, mostly unreachable: any solution must still respect the limits.
    for _ in 0..300 {
        let seed = random_q(&mut rng, &m);
        let target = Pose::new(
            Vector3::from_fn(|_, _| rng.random_range(-900.0..900.0)),
            UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0))),
        );
        if let Ok(sol) = inverse_kinematics(&m, &target, &seed, &opts) {
            outside += usize::from(!m.within_limits(&sol.q));
        }
    }
    let rate = converged as f64 / trials as f64;
    check(
        fd_worst < 1e-4 && rate >= 0.99 && outside == 0,
        format!(
            "FD max deviation {fd_worst:.2e} (< 1e-4), IK {converged}/{trials} converged (>= 99%), \
             worst tip error {worst_tip:.2e} mm (< 1e-3), {outside} solutions outside limits"
        ),
    )
}

fn registration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut worst_det = 0.0f64;
    for i in 0..500 {
        let truth = RigidTransform::new(
            UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0))),
            Vector3::from_fn(|_, _| rng.random_range(-1000.0..1000.0)),
        );
        let n = rng.random_range(3..20);
        let ops: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-500.0..500.0)))
            .collect();
        // Every fifth set is mirrored, which must still produce a proper rotation.
        let mirrored = i % 5 == 0;
        let pairs: Vec<_> = ops
            .iter()
            .map(|p| {
                let r = truth.apply(p);
                (
                    *p,
                    if mirrored {
                        Vector3::new(-r.x, r.y, r.z)
                    } else {
                        r
                    },
                )
            })
            .collect();
        let reg = register_frames(&pairs).map_err(|e| e.to_string())?;
        let det = reg
            .transform
            .rotation
            .to_rotation_matrix()
            .matrix()
            .determinant();
        worst_det = worst_det.max((det - 1.0).abs());
        if !mirrored {
            let dr = (reg.transform.rotation.to_rotation_matrix().matrix()
                - truth.rotation.to_rotation_matrix().matrix())
            .abs()
            .max();
            let dt = (reg.transform.translation - truth.translation).norm();
            worst = worst.max(dr).max(dt).max(reg.stats.max);
        }
    }
    let p = |x: f64| Vector3::new(x, 2.0 * x, -x);
    let too_few = matches!(
        register_frames(&[(p(0.0), p(0.0)), (p(1.0), p(1.0))]),
        Err(CalibrationError::TooFewPairs(2))
    );
    let collinear = matches!(
        register_frames(&[(p(0.0), p(0.0)), (p(1.0), p(1.0)), (p(5.0), p(5.0))]),
        Err(CalibrationError::DegenerateGeometry)
    );
    let coincident = matches!(
        register_frames(&[(p(1.0), p(0.0)); 4]),
        Err(CalibrationError::DegenerateGeometry)
    );
    check(
        worst <= 1e-9 && worst_det < 1e-12 && too_few && collinear && coincident,
        format!(
            "recovery max deviation {worst:.2e} (<= 1e-9), |det R - 1| max {worst_det:.1e}, \
             TooFewPairs {too_few}, Degenerate collinear {collinear} coincident {coincident}"
        ),
    )
}

fn protocol_round_trip() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let n = std::cell::Cell::new(0u32);
    let result = runner.run(&common::wire::message(), |msg| {
        n.set(n.get() + 1);
        let bytes = encode(&msg).unwrap();
        proptest::prop_assert_eq!(decode(&bytes).unwrap(), msg.clone());
        proptest::prop_assert_eq!(encode(&msg).unwrap(), bytes);
        Ok(())
    });
    match result {
        Ok(()) => check(
            n.get() >= 10_000,
            format!("{} generated messages round-tripped (>= 10000)", n.get()),
        ),
        Err(e) => Err(format!("round trip failed: {e}")),
    }
}

fn fuzz(len: usize, seeds: u64, clients: &[usize]) -> Result<FuzzStats, String> {
    let mut total = FuzzStats::default();
    for seed in 0..seeds {
        let mut ops: Vec<Op> = clients.iter().map(|c| Op::Connect(*c)).collect();
        ops.extend(
            random_sequence(seed, len)
                .into_iter()
                .filter(|op| match op {
                    Op::Connect(c) | Op::Disconnect(c) => clients.contains(c),
                    _ => true,
                }),
        );
        let s = run_sequence(&ops).map_err(|e| format!("seed {seed}: {e}"))?;
        total.events += s.events;
        total.teleop_commands += s.teleop_commands;
        total.summaries += s.summaries;
        total.validations += s.validations;
    }
    Ok(total)
}

fn gating_fuzz() -> Outcome {
    let t = fuzz(300, 100, &[0])?;
    check(
        t.teleop_commands > 0,
        format!(
            "0 ungated commands in {} events; {} gated commands, {} summaries, {} validations",
            t.events, t.teleop_commands, t.summaries, t.validations
        ),
    )
}

fn multi_client_fuzz() -> Outcome {
    let t = fuzz(300, 200, &[0, 1, 2])?;
    check(
        t.teleop_commands > 0,
        format!(
            "single engager held over {} events from 3 clients ({} commands, {} validations)",
            t.events, t.teleop_commands, t.validations
        ),
    )
}

fn determinism() -> Outcome {
    let mut bytes = 0;
    for task in 1..=3 {
        let script = gen_task(task, 5).unwrap();
        if script.to_json() != gen_task(task, 5).unwrap().to_json() {
            return Err(format!("task {task} script differs between generations"));
        }
        let a = replay(&script, ReplayOptions::default()).unwrap();
        let b = replay(&script, ReplayOptions::default()).unwrap();
        if a.report.to_json() != b.report.to_json() {
            return Err(format!("task {task} reports differ"));
        }
        bytes += a.report.to_json().len();
    }
    Ok(format!(
        "tasks 1-3 replayed twice, reports byte-identical ({bytes} bytes)"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("task-1 planar figures", task_one),
        ("task-2 targets and trocar", task_two),
        ("task-3 trajectory following", task_three),
        ("pipeline latency", latency),
        ("kinematics properties", kinematics),
        ("registration", registration),
        ("protocol round trip", protocol_round_trip),
        ("gating fuzz", gating_fuzz),
        ("multi-client fuzz", multi_client_fuzz),
        ("replay determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
