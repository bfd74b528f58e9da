//! Pose metrics: diameter-normalized ADD and viewpoint (rotation) precision.

use nalgebra::Matrix3;

use crate::error::{GroundPoseError, Result};
use crate::rotation;
use crate::scene_model::{ObjectState, ShapeAtlas};

/// ADD thresholds as fractions of the object diameter.
pub const ADD_THRESHOLDS: [f64; 5] = [0.4, 0.8, 1.2, 1.6, 2.0];
/// Viewpoint thresholds in radians.
pub const VIEWPOINT_THRESHOLDS: [f64; 5] = [0.14, 0.21, 0.28, 0.35, 0.42];

/// Mean keypoint distance between the two instantiated shapes, divided by the atlas diameter.
pub fn add_distance(est: &ObjectState, gt: &ObjectState, atlas: &ShapeAtlas) -> Result<f64> {
    let a = est.camera_points(atlas)?;
    let b = gt.camera_points(atlas)?;
    let mean = a.iter().zip(&b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64;
    Ok(mean / atlas.diameter)
}

/// Geodesic distance `acos((trace(A^T B) - 1) / 2)` in `[0, pi]`.
pub fn geodesic_error(est: &Matrix3<f64>, gt: &Matrix3<f64>) -> f64 {
    rotation::geodesic_distance(est, gt)
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(GroundPoseError::invalid("thresholds must be sorted ascending"));
    }
    Ok(())
}

/// Percentage of `errors` at or below each threshold.
pub fn accuracy_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(GroundPoseError::InsufficientData("no pairs to evaluate".into()));
    }
    check_thresholds(thresholds)?;
    Ok(thresholds
        .iter()
        .map(|&t| 100.0 * errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        .collect())
}

/// `(estimate, ground truth)`.
pub type PosePair = (ObjectState, ObjectState);

pub fn add_accuracy(pairs: &[PosePair], atlas: &ShapeAtlas, thresholds: &[f64]) -> Result<Vec<f64>> {
    let errors = pairs
        .iter()
        .map(|(e, g)| add_distance(e, g, atlas))
        .collect::<Result<Vec<_>>>()?;
    accuracy_curve(&errors, thresholds)
}

pub fn viewpoint_precision(pairs: &[PosePair], thresholds: &[f64]) -> Result<Vec<f64>> {
    let errors: Vec<f64> = pairs
        .iter()
        .map(|(e, g)| geodesic_error(&e.rotation, &g.rotation))
        .collect();
    accuracy_curve(&errors, thresholds)
}
