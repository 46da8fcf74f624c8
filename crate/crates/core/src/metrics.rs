//! Evaluation pipeline: positional error, hand-versus-tip trajectory deviation, pipeline
//! latency, task timing, and the report/CSV formats.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{ArmModel, JointVector};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectory series needs at least two samples (hand {hand}, tip {tip})")]
    EmptySeries { hand: usize, tip: usize },
    #[error("missing {0} marker")]
    MissingMarker(&'static str),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Distance between a target point and the camera tip of configuration `q` (mm).
pub fn positional_error(target: &Vector3<f64>, model: &ArmModel<f64>, q: &JointVector<f64>) -> f64 {
    model
        .tip_pose(q)
        .map(|p| (target - p.position).norm())
        .unwrap_or(f64::NAN)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySample {
    pub t_ms: f64,
    pub position: Vector3<f64>,
}

impl TrajectorySample {
    pub fn new(t_ms: f64, position: Vector3<f64>) -> Self {
        Self { t_ms, position }
    }
}

/// One row of the aligned hand/tip series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedSample {
    pub t_ms: f64,
    pub hand_x: f64,
    pub hand_y: f64,
    pub hand_z: f64,
    pub tip_x: f64,
    pub tip_y: f64,
    pub tip_z: f64,
}

impl AlignedSample {
    pub fn hand(&self) -> Vector3<f64> {
        Vector3::new(self.hand_x, self.hand_y, self.hand_z)
    }

    pub fn tip(&self) -> Vector3<f64> {
        Vector3::new(self.tip_x, self.tip_y, self.tip_z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deviation {
    pub rms_mm: f64,
    pub aligned: Vec<AlignedSample>,
}

/// Piecewise-linear interpolation of a time-sorted series, clamped at both ends.
pub fn interpolate(series: &[TrajectorySample], t_ms: f64) -> Vector3<f64> {
    let i = series.partition_point(|s| s.t_ms <= t_ms);
    if i == 0 {
        return series[0].position;
    }
    if i == series.len() {
        return series[i - 1].position;
    }
    let (a, b) = (&series[i - 1], &series[i]);
    let span = b.t_ms - a.t_ms;
    if span <= 0.0 {
        return b.position;
    }
    let s = (t_ms - a.t_ms) / span;
    a.position + (b.position - a.position) * s
}

/// RMS distance between the hand series and the tip series resampled at the hand timestamps.
pub fn trajectory_deviation(
    hand: &[TrajectorySample],
    tip: &[TrajectorySample],
) -> Result<Deviation, MetricsError> {
    if hand.len() < 2 || tip.len() < 2 {
        return Err(MetricsError::EmptySeries {
            hand: hand.len(),
            tip: tip.len(),
        });
    }
    let aligned: Vec<AlignedSample> = hand
        .iter()
        .map(|h| {
            let t = interpolate(tip, h.t_ms);
            AlignedSample {
                t_ms: h.t_ms,
                hand_x: h.position.x,
                hand_y: h.position.y,
                hand_z: h.position.z,
                tip_x: t.x,
                tip_y: t.y,
                tip_z: t.z,
            }
        })
        .collect();
    let sum: f64 = aligned
        .iter()
        .map(|a| (a.hand() - a.tip()).norm_squared())
        .sum();
    Ok(Deviation {
        rms_mm: (sum / aligned.len() as f64).sqrt(),
        aligned,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: u64,
    pub median_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

/// Nearest-rank percentile of a sorted slice, `p` in (0, 1].
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Order statistics of `command - receive` over `(receive_us, command_us)` pairs.
pub fn latency_stats(pairs: &[(f64, f64)]) -> LatencyStats {
    let mut d: Vec<f64> = pairs.iter().map(|(r, c)| (c - r).max(0.0)).collect();
    if d.is_empty() {
        return LatencyStats::default();
    }
    d.sort_by(f64::total_cmp);
    LatencyStats {
        n: d.len() as u64,
        median_us: nearest_rank(&d, 0.5),
        p95_us: nearest_rank(&d, 0.95),
        max_us: *d.last().expect("non-empty"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    TaskStart,
    TaskEnd,
}

/// Seconds between the first start marker and the last end marker.
pub fn task_timer(events: &[(Marker, f64)]) -> Result<f64, MetricsError> {
    let start = events
        .iter()
        .find(|(m, _)| *m == Marker::TaskStart)
        .ok_or(MetricsError::MissingMarker("task_start"))?
        .1;
    let end = events
        .iter()
        .rev()
        .find(|(m, _)| *m == Marker::TaskEnd)
        .ok_or(MetricsError::MissingMarker("task_end"))?
        .1;
    Ok(((end - start) / 1000.0).max(0.0))
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub report_version: u32,
    pub task_id: u8,
    pub mean_error_mm: f64,
    pub max_error_mm: f64,
    pub trajectory_rms_mm: f64,
    pub latency: LatencyStats,
    pub duration_s: f64,
    pub n_hand_samples: u64,
    pub n_tip_samples: u64,
    pub n_commands: u64,
    /// Tip distance to each scene target when its checkpoint was reached.
    pub target_errors_mm: Vec<f64>,
    /// Largest distance from the trocar point to the camera axis while inserted.
    pub max_trocar_distance_mm: f64,
    pub gating_violations: u64,
    pub ik_skips: u64,
}

impl TaskReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Mean and max of a list of errors; zero for an empty list.
pub fn mean_max(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let max = errors.iter().copied().fold(0.0, f64::max);
    (mean, max)
}

pub fn write_csv(path: &Path, rows: &[AlignedSample]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "t_ms", "hand_x", "hand_y", "hand_z", "tip_x", "tip_y", "tip_z",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_csv(path: &Path) -> Result<Vec<AlignedSample>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}
