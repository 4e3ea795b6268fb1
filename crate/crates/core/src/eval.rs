//! Pose-accuracy metrics and marker-distance evaluation.
//!
//! Estimated trajectories carry an unobservable global rigid motion, so they
//! are first aligned by the transform that maps the estimated anchor frame
//! onto its ground truth; errors are then per-frame translation distance and
//! geodesic rotation angle, summarised as MAE and RMSE.

use crate::error::{Error, Result};
use crate::geometry::{geodesic_angle, Pose};
use crate::io::TrajectoryRecord;
use nalgebra::Vector3;
use serde::Serialize;
use std::collections::HashMap;
use std::fmt::Write as _;

/// Per-frame pose error.
#[derive(Debug, Clone, Serialize)]
pub struct FrameError {
    pub frame_id: String,
    /// Euclidean translation error, metres.
    pub trans: f64,
    /// Geodesic rotation error, radians.
    pub rot: f64,
}

/// MAE/RMSE summary over frames, translation and rotation separately.
#[derive(Debug, Clone, Serialize)]
pub struct PoseErrorSummary {
    pub mae_trans: f64,
    pub rmse_trans: f64,
    pub mae_rot: f64,
    pub rmse_rot: f64,
    pub per_frame: Vec<FrameError>,
}

impl PoseErrorSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises")
    }

    /// Plain-text table with four summary rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<16} {:>12}", "Metric", "Value").unwrap();
        writeln!(out, "{:<16} {:>12.4}", "MAE(Trans/m)", self.mae_trans).unwrap();
        writeln!(out, "{:<16} {:>12.4}", "RMSE(Trans/m)", self.rmse_trans).unwrap();
        writeln!(out, "{:<16} {:>12.4}", "MAE(Rot/rad)", self.mae_rot).unwrap();
        writeln!(out, "{:<16} {:>12.4}", "RMSE(Rot/rad)", self.rmse_rot).unwrap();
        out
    }
}

fn check_frames(estimated: &[TrajectoryRecord], ground_truth: &[TrajectoryRecord]) -> Result<()> {
    if estimated.len() != ground_truth.len() || estimated.is_empty() {
        return Err(Error::FrameMismatch(format!(
            "estimated has {} frames, ground truth has {}",
            estimated.len(),
            ground_truth.len()
        )));
    }
    for (e, g) in estimated.iter().zip(ground_truth) {
        if e.frame_id != g.frame_id {
            return Err(Error::FrameMismatch(format!(
                "frame id '{}' does not match '{}'",
                e.frame_id, g.frame_id
            )));
        }
    }
    Ok(())
}

/// Applies the rigid transform that maps the estimated anchor (first) frame
/// onto its ground-truth pose to every estimated pose.
pub fn align_gauge(
    estimated: &[TrajectoryRecord],
    ground_truth: &[TrajectoryRecord],
) -> Result<Vec<TrajectoryRecord>> {
    check_frames(estimated, ground_truth)?;
    let correction = ground_truth[0].pose.compose(&estimated[0].pose.inverse());
    Ok(estimated
        .iter()
        .map(|rec| TrajectoryRecord {
            frame_id: rec.frame_id.clone(),
            pose: correction.compose(&rec.pose),
        })
        .collect())
}

/// Per-frame translation/rotation errors with MAE and RMSE summaries.
/// Inputs are expected to be gauge-aligned already.
pub fn pose_errors(
    estimated: &[TrajectoryRecord],
    ground_truth: &[TrajectoryRecord],
) -> Result<PoseErrorSummary> {
    check_frames(estimated, ground_truth)?;
    let per_frame: Vec<FrameError> = estimated
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| FrameError {
            frame_id: e.frame_id.clone(),
            trans: (e.pose.t - g.pose.t).norm(),
            rot: geodesic_angle(&e.pose.rotation(), &g.pose.rotation()),
        })
        .collect();
    let n = per_frame.len() as f64;
    let mae = |f: fn(&FrameError) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    let rmse =
        |f: fn(&FrameError) -> f64| (per_frame.iter().map(|e| f(e) * f(e)).sum::<f64>() / n).sqrt();
    Ok(PoseErrorSummary {
        mae_trans: mae(|e| e.trans),
        rmse_trans: rmse(|e| e.trans),
        mae_rot: mae(|e| e.rot),
        rmse_rot: rmse(|e| e.rot),
        per_frame,
    })
}

/// A marker seen in one frame, in that frame's local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerObservation {
    pub marker_id: String,
    pub frame_id: String,
    pub point: Vector3<f64>,
}

/// Axis along which a reference distance is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceAxis {
    X,
    Y,
    Z,
    Euclidean,
}

impl DistanceAxis {
    pub fn parse(name: &str) -> Option<DistanceAxis> {
        match name {
            "x" | "X" => Some(DistanceAxis::X),
            "y" | "Y" => Some(DistanceAxis::Y),
            "z" | "Z" => Some(DistanceAxis::Z),
            "euclidean" | "e" => Some(DistanceAxis::Euclidean),
            _ => None,
        }
    }
}

/// A surveyed distance between two markers.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerReference {
    pub a: String,
    pub b: String,
    pub axis: DistanceAxis,
    pub distance: f64,
}

/// One evaluated marker pair.
#[derive(Debug, Clone, Serialize)]
pub struct MarkerDistanceError {
    pub a: String,
    pub b: String,
    pub axis: DistanceAxis,
    pub reference: f64,
    pub estimated: f64,
    pub error: f64,
}

/// Reconstructs marker positions under the given poses (mean over the frames
/// observing each marker) and compares pairwise distances with references.
pub fn marker_distance_errors(
    observations: &[MarkerObservation],
    poses: &[TrajectoryRecord],
    references: &[MarkerReference],
) -> Result<Vec<MarkerDistanceError>> {
    let pose_of: HashMap<&str, &Pose> = poses
        .iter()
        .map(|r| (r.frame_id.as_str(), &r.pose))
        .collect();
    let mut positions: HashMap<&str, (Vector3<f64>, usize)> = HashMap::new();
    for obs in observations {
        let pose = pose_of.get(obs.frame_id.as_str()).ok_or_else(|| {
            Error::FrameMismatch(format!(
                "marker '{}' observed in unknown frame '{}'",
                obs.marker_id, obs.frame_id
            ))
        })?;
        let global = pose.transform_point(&obs.point);
        let entry = positions
            .entry(obs.marker_id.as_str())
            .or_insert((Vector3::zeros(), 0));
        entry.0 += global;
        entry.1 += 1;
    }
    let lookup = |id: &str| -> Result<Vector3<f64>> {
        positions
            .get(id)
            .map(|(sum, count)| sum / *count as f64)
            .ok_or_else(|| Error::MissingMarker(id.to_string()))
    };

    references
        .iter()
        .map(|r| {
            let pa = lookup(&r.a)?;
            let pb = lookup(&r.b)?;
            let estimated = match r.axis {
                DistanceAxis::X => (pa.x - pb.x).abs(),
                DistanceAxis::Y => (pa.y - pb.y).abs(),
                DistanceAxis::Z => (pa.z - pb.z).abs(),
                DistanceAxis::Euclidean => (pa - pb).norm(),
            };
            Ok(MarkerDistanceError {
                a: r.a.clone(),
                b: r.b.clone(),
                axis: r.axis,
                reference: r.distance,
                estimated,
                error: (estimated - r.distance).abs(),
            })
        })
        .collect()
}
