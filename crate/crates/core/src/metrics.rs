//! 6DoF head-pose and reconstruction metrics: mean absolute Euler error,
//! mean absolute translation error, ADD, geodesic rotation distance, and
//! canonical-mesh vertex-error statistics, plus aggregation across samples.
//!
//! Angular errors are computed per Euler component with wrap-around on the
//! circle and depend on the fixed yaw-Y/pitch-X/roll-Z convention of
//! [`crate::geometry`]. ADD is the mean per-vertex Euclidean distance
//! between the two posed copies of the ground-truth mesh, in mm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_to_euler, wrap_half_open, RigidPose};
use crate::pca::CanonicalMesh;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
}

/// Aggregated evaluation metrics over one or more samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean absolute Euler-angle error (degrees).
    pub mae_r: f64,
    /// Mean absolute translation error (mm).
    pub mae_t: f64,
    /// Average per-vertex distance between posed ground-truth meshes (mm).
    pub add: f64,
    /// Geodesic rotation distance (radians).
    pub geodesic: f64,
    /// Median canonical-mesh vertex error (mm).
    pub vertex_median: f64,
    /// Mean canonical-mesh vertex error (mm).
    pub vertex_mean: f64,
    pub sample_count: usize,
}

impl EvalReport {
    /// Builds a single-sample report.
    #[allow(clippy::too_many_arguments)]
    pub fn single(
        mae_r: f64,
        mae_t: f64,
        add: f64,
        geodesic: f64,
        vertex_median: f64,
        vertex_mean: f64,
    ) -> Self {
        Self {
            mae_r,
            mae_t,
            add,
            geodesic,
            vertex_median,
            vertex_mean,
            sample_count: 1,
        }
    }

    pub fn csv_header() -> &'static str {
        "mae_r,mae_t,add,geodesic,vertex_median,vertex_mean,sample_count"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mae_r,
            self.mae_t,
            self.add,
            self.geodesic,
            self.vertex_median,
            self.vertex_mean,
            self.sample_count
        )
    }
}

/// Mean absolute error over the three Euler components (degrees), each
/// difference wrapped to the shorter way around the circle.
pub fn mae_r(pred: &RigidPose, gt: &RigidPose) -> f64 {
    let a = pose_to_euler(pred);
    let b = pose_to_euler(gt);
    let dy = wrap_half_open(a.yaw - b.yaw).abs();
    let dp = wrap_half_open(a.pitch - b.pitch).abs();
    let dr = wrap_half_open(a.roll - b.roll).abs();
    (dy + dp + dr) / 3.0
}

/// Mean absolute error over the three translation components (mm).
pub fn mae_t(pred: &RigidPose, gt: &RigidPose) -> f64 {
    let d = pred.translation() - gt.translation();
    (d.x.abs() + d.y.abs() + d.z.abs()) / 3.0
}

/// Average distance between the ground-truth mesh posed by the prediction
/// and by the ground truth: `mean_v ‖P_pred v − P_gt v‖` (mm).
pub fn add(pred: &RigidPose, gt: &RigidPose, mesh_gt: &CanonicalMesh) -> f64 {
    if mesh_gt.is_empty() {
        return 0.0;
    }
    let sum: f64 = mesh_gt
        .vertices()
        .iter()
        .map(|v| (pred.transform_point(v) - gt.transform_point(v)).norm())
        .sum();
    sum / mesh_gt.len() as f64
}

/// Angle of the relative rotation, `arccos((trace(R_predᵀ R_gt) − 1)/2)`,
/// with the argument clamped to `[-1, 1]`.
pub fn geodesic_distance(pred: &RigidPose, gt: &RigidPose) -> f64 {
    let m = pred.rotation_matrix().transpose() * gt.rotation_matrix();
    (((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// Median and mean of per-vertex Euclidean distances (mm).
pub fn vertex_error_stats(
    pred: &CanonicalMesh,
    gt: &CanonicalMesh,
) -> Result<(f64, f64), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::DimensionMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput("empty meshes".into()));
    }
    let mut dists: Vec<f64> = pred
        .vertices()
        .iter()
        .zip(gt.vertices())
        .map(|(a, b)| (a - b).norm())
        .collect();
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    Ok((median_in_place(&mut dists), mean))
}

fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Aggregates per-sample reports: arithmetic means of every metric except
/// `vertex_median`, which is the median of the per-sample medians.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput("no reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mut medians: Vec<f64> = reports.iter().map(|r| r.vertex_median).collect();
    Ok(EvalReport {
        mae_r: reports.iter().map(|r| r.mae_r).sum::<f64>() / n,
        mae_t: reports.iter().map(|r| r.mae_t).sum::<f64>() / n,
        add: reports.iter().map(|r| r.add).sum::<f64>() / n,
        geodesic: reports.iter().map(|r| r.geodesic).sum::<f64>() / n,
        vertex_median: median_in_place(&mut medians),
        vertex_mean: reports.iter().map(|r| r.vertex_mean).sum::<f64>() / n,
        sample_count: reports.iter().map(|r| r.sample_count).sum(),
    })
}
