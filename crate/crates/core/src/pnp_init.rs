//! Closed-form rigid pose from the mean shape, and a rigid local polish.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector3, Vector4};

use crate::deformable_pose::{ObjectProblem, ObjectiveWeights};
use crate::error::{GroundPoseError, Result};
use crate::rotation;
use crate::scene_model::{CameraIntrinsics, CoeffBoundMode, Detection, ObjectState, ShapeAtlas};

/// Keypoints below this score are not used by the linear system.
pub const DEFAULT_DLT_MIN_SCORE: f64 = 0.05;
const MIN_CORRESPONDENCES: usize = 6;

pub fn dlt_pose(det: &Detection, atlas: &ShapeAtlas, cam: &CameraIntrinsics) -> Result<ObjectState> {
    dlt_pose_with_threshold(det, atlas, cam, DEFAULT_DLT_MIN_SCORE)
}

/// Estimates the 3x4 object-to-camera projection from normalized image
/// coordinates, then factors it into the nearest rotation and a translation.
pub fn dlt_pose_with_threshold(
    det: &Detection,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
    min_score: f64,
) -> Result<ObjectState> {
    if det.keypoints.len() != atlas.num_keypoints() || det.scores.len() != atlas.num_keypoints() {
        return Err(GroundPoseError::invalid(format!(
            "detection {} has {} keypoints, atlas has {}",
            det.id,
            det.keypoints.len(),
            atlas.num_keypoints()
        )));
    }
    let used: Vec<usize> = (0..det.keypoints.len())
        .filter(|&i| det.scores[i] > 0.0 && det.scores[i] >= min_score)
        .collect();
    if used.len() < MIN_CORRESPONDENCES {
        return Err(GroundPoseError::Underdetermined {
            usable: used.len(),
            required: MIN_CORRESPONDENCES,
        });
    }

    // condition the 3D side: zero centroid, unit RMS radius per axis
    let centroid = used.iter().map(|&i| atlas.mean_shape[i]).sum::<Vector3<f64>>() / used.len() as f64;
    let rms = (used
        .iter()
        .map(|&i| (atlas.mean_shape[i] - centroid).norm_squared())
        .sum::<f64>()
        / used.len() as f64)
        .sqrt();
    if !(rms > 0.0) {
        return Err(GroundPoseError::Degenerate("keypoints coincide".into()));
    }
    let scale = rms / 3f64.sqrt();

    let mut a = DMatrix::<f64>::zeros(2 * used.len(), 12);
    let mut homogeneous = Vec::with_capacity(used.len());
    for (row, &i) in used.iter().enumerate() {
        let xw = (atlas.mean_shape[i] - centroid) / scale;
        let xh = Vector4::new(xw.x, xw.y, xw.z, 1.0);
        let xn = (det.keypoints[i].x - cam.principal_point.x) / cam.focal;
        let yn = (det.keypoints[i].y - cam.principal_point.y) / cam.focal;
        for k in 0..4 {
            a[(2 * row, k)] = xh[k];
            a[(2 * row, 8 + k)] = -xn * xh[k];
            a[(2 * row + 1, 4 + k)] = xh[k];
            a[(2 * row + 1, 8 + k)] = -yn * xh[k];
        }
        homogeneous.push(xh);
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| GroundPoseError::Degenerate("svd failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[order.len() - 2]];
    if !(largest > 0.0) || second_smallest <= 1e-9 * largest {
        return Err(GroundPoseError::Degenerate(
            "linear pose system has a multi-dimensional null space".into(),
        ));
    }
    let null = v_t.row(order[order.len() - 1]);
    let mut p = Matrix3x4::from_fn(|r, c| null[4 * r + c]);

    // keypoints must have positive depth
    let depth_sum: f64 = homogeneous.iter().map(|x| (p.row(2) * x)[0]).sum();
    if depth_sum < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let sv = m.svd(false, false).singular_values;
    let sigma = sv.mean();
    if !(sigma > 0.0) {
        return Err(GroundPoseError::Degenerate("projection has zero scale".into()));
    }
    let r = rotation::nearest_rotation(&m);
    let t_normalized = p.column(3) / sigma;
    let translation = t_normalized * scale - r * centroid;
    if !(translation.z > 0.0) {
        return Err(GroundPoseError::Degenerate(format!(
            "recovered translation lies behind the camera (z = {})",
            translation.z
        )));
    }
    Ok(ObjectState::rigid(r, translation, atlas.num_components()))
}

/// Damped Gauss-Newton polish of `(R, T)` with the shape held fixed.
///
/// The reprojection error never increases. Fails with `NoProgress` when the
/// first step already cannot decrease the loss away from a stationary point.
pub fn refine_rigid(
    init: &ObjectState,
    det: &Detection,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
    iters: usize,
) -> Result<ObjectState> {
    let problem = ObjectProblem::new(
        det,
        atlas,
        cam,
        None,
        ObjectiveWeights::default(),
        CoeffBoundMode::Symmetric,
    );
    let loss = problem.loss(init)?;
    if iters == 0 || loss == 0.0 {
        return Ok(init.clone());
    }
    let (state, final_loss, moved) = problem.pose_block(init, loss, iters)?;
    if !moved && !problem.is_stationary(init)? {
        return Err(GroundPoseError::NoProgress {
            best: Box::new(state),
            loss: final_loss,
        });
    }
    Ok(state)
}
