//! Pinhole projection (full and weak perspective), confidence-weighted
//! reprojection residuals and their analytic Jacobian.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{GroundPoseError, Result};
use crate::rotation;
use crate::scene_model::{CameraIntrinsics, Detection, ObjectState, ShapeAtlas};

/// First Jacobian column of the rotation tangent (left increment).
pub const COL_ROTATION: usize = 0;
/// First Jacobian column of the translation.
pub const COL_TRANSLATION: usize = 3;
/// First Jacobian column of the shape coefficients.
pub const COL_COEFFS: usize = 6;

/// Stacked residuals `sqrt(s_i) * (pi(R X_i + T) - x_i)` of one object.
///
/// Rows `2i` and `2i + 1` belong to keypoint `i`. Columns are
/// `[rotation tangent (3) | translation (3) | coeffs (m) | focal (1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl ResidualBlock {
    pub fn focal_column(&self) -> usize {
        self.jacobian.ncols() - 1
    }

    pub fn squared_norm(&self) -> f64 {
        self.residuals.norm_squared()
    }
}

pub fn project_point(p: &Vector3<f64>, cam: &CameraIntrinsics) -> Result<Vector2<f64>> {
    if !(p.z > 0.0) {
        return Err(GroundPoseError::BehindCamera {
            object: String::new(),
            keypoint: 0,
            depth: p.z,
        });
    }
    Ok(Vector2::new(
        cam.focal * p.x / p.z + cam.principal_point.x,
        cam.focal * p.y / p.z + cam.principal_point.y,
    ))
}

/// Projects every point as if it sat at depth `depth_ref`.
pub fn project_weak(
    points: &[Vector3<f64>],
    depth_ref: f64,
    cam: &CameraIntrinsics,
) -> Result<Vec<Vector2<f64>>> {
    if !(depth_ref > 0.0) {
        return Err(GroundPoseError::invalid(format!(
            "weak-perspective reference depth must be positive, got {depth_ref}"
        )));
    }
    Ok(points
        .iter()
        .map(|p| {
            Vector2::new(
                cam.focal * p.x / depth_ref + cam.principal_point.x,
                cam.focal * p.y / depth_ref + cam.principal_point.y,
            )
        })
        .collect())
}

fn check_dimensions(state: &ObjectState, det: &Detection, atlas: &ShapeAtlas) -> Result<()> {
    let n = atlas.num_keypoints();
    if det.keypoints.len() != n || det.scores.len() != n {
        return Err(GroundPoseError::invalid(format!(
            "detection {} has {} keypoints, atlas has {n}",
            det.id,
            det.keypoints.len()
        )));
    }
    if state.coeffs.len() != atlas.num_components() {
        return Err(GroundPoseError::invalid(format!(
            "state has {} coefficients, atlas has {}",
            state.coeffs.len(),
            atlas.num_components()
        )));
    }
    Ok(())
}

/// Object-frame shape and camera-frame keypoints.
type ShapeAndCameraPoints = (Vec<Vector3<f64>>, Vec<Vector3<f64>>);

/// Camera-frame keypoints of `state`, failing on the first point at `z <= 0`.
pub(crate) fn camera_points_checked(
    state: &ObjectState,
    det: &Detection,
    atlas: &ShapeAtlas,
) -> Result<ShapeAndCameraPoints> {
    let shape = atlas.instantiate(&state.coeffs)?;
    let mut cam_pts = Vec::with_capacity(shape.len());
    for (i, x) in shape.iter().enumerate() {
        let p = state.rotation * x + state.translation;
        if !(p.z > 0.0) {
            return Err(GroundPoseError::BehindCamera {
                object: det.id.clone(),
                keypoint: i,
                depth: p.z,
            });
        }
        cam_pts.push(p);
    }
    Ok((shape, cam_pts))
}

/// Weighted reprojection error `sum_i s_i |pi(R X_i + T) - x_i|^2`, no regularizer.
pub fn reprojection_error(
    state: &ObjectState,
    det: &Detection,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
) -> Result<f64> {
    check_dimensions(state, det, atlas)?;
    let (_, pts) = camera_points_checked(state, det, atlas)?;
    let mut total = 0.0;
    for ((p, x), &s) in pts.iter().zip(&det.keypoints).zip(&det.scores) {
        if s <= 0.0 {
            continue;
        }
        let u = cam.focal * p.x / p.z + cam.principal_point.x - x.x;
        let v = cam.focal * p.y / p.z + cam.principal_point.y - x.y;
        total += s * (u * u + v * v);
    }
    Ok(total)
}

pub fn reprojection_residuals(
    state: &ObjectState,
    det: &Detection,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
) -> Result<ResidualBlock> {
    check_dimensions(state, det, atlas)?;
    let n = atlas.num_keypoints();
    let m = atlas.num_components();
    let (shape, pts) = camera_points_checked(state, det, atlas)?;
    let mut residuals = DVector::zeros(2 * n);
    let mut jacobian = DMatrix::zeros(2 * n, COL_COEFFS + m + 1);
    let f = cam.focal;
    for i in 0..n {
        let s = det.scores[i];
        if s <= 0.0 {
            continue;
        }
        let w = s.sqrt();
        let p = pts[i];
        let iz = 1.0 / p.z;
        let x = &det.keypoints[i];
        residuals[2 * i] = w * (f * p.x * iz + cam.principal_point.x - x.x);
        residuals[2 * i + 1] = w * (f * p.y * iz + cam.principal_point.y - x.y);

        let dproj = Matrix2x3::new(
            f * iz,
            0.0,
            -f * p.x * iz * iz,
            0.0,
            f * iz,
            -f * p.y * iz * iz,
        ) * w;
        let rx = state.rotation * shape[i];
        let d_rot = dproj * (-rotation::hat(&rx));
        jacobian
            .fixed_view_mut::<2, 3>(2 * i, COL_ROTATION)
            .copy_from(&d_rot);
        jacobian
            .fixed_view_mut::<2, 3>(2 * i, COL_TRANSLATION)
            .copy_from(&dproj);
        for j in 0..m {
            let d = dproj * (state.rotation * atlas.basis[j][i]);
            jacobian[(2 * i, COL_COEFFS + j)] = d.x;
            jacobian[(2 * i + 1, COL_COEFFS + j)] = d.y;
        }
        jacobian[(2 * i, COL_COEFFS + m)] = w * p.x * iz;
        jacobian[(2 * i + 1, COL_COEFFS + m)] = w * p.y * iz;
    }
    Ok(ResidualBlock {
        residuals,
        jacobian,
    })
}

/// Worst relative disagreement between the analytic Jacobian and central
/// finite differences with step `eps`, over entries larger than `1e-8`.
///
/// The focal column uses a step of `eps * focal`.
pub fn check_jacobian(
    state: &ObjectState,
    det: &Detection,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
    eps: f64,
) -> Result<f64> {
    if !(eps > 1e-9 && eps < 1e-3) {
        return Err(GroundPoseError::invalid(format!(
            "finite-difference step must lie in (1e-9, 1e-3), got {eps}"
        )));
    }
    let block = reprojection_residuals(state, det, atlas, cam)?;
    let m = atlas.num_components();
    let ncols = block.jacobian.ncols();
    let eval = |st: &ObjectState, c: &CameraIntrinsics| -> Result<DVector<f64>> {
        Ok(reprojection_residuals(st, det, atlas, c)?.residuals)
    };
    let mut worst = 0.0_f64;
    for col in 0..ncols {
        let (plus, minus, step) = match col {
            c if c < COL_TRANSLATION => {
                let mut delta = Vector3::zeros();
                delta[c] = eps;
                let mut sp = state.clone();
                sp.rotation = rotation::exp(&delta) * state.rotation;
                let mut sm = state.clone();
                sm.rotation = rotation::exp(&-delta) * state.rotation;
                (eval(&sp, cam)?, eval(&sm, cam)?, eps)
            }
            c if c < COL_COEFFS => {
                let mut sp = state.clone();
                sp.translation[c - COL_TRANSLATION] += eps;
                let mut sm = state.clone();
                sm.translation[c - COL_TRANSLATION] -= eps;
                (eval(&sp, cam)?, eval(&sm, cam)?, eps)
            }
            c if c < COL_COEFFS + m => {
                let mut sp = state.clone();
                sp.coeffs[c - COL_COEFFS] += eps;
                let mut sm = state.clone();
                sm.coeffs[c - COL_COEFFS] -= eps;
                (eval(&sp, cam)?, eval(&sm, cam)?, eps)
            }
            _ => {
                let h = eps * cam.focal;
                (
                    eval(state, &cam.with_focal(cam.focal + h))?,
                    eval(state, &cam.with_focal(cam.focal - h))?,
                    h,
                )
            }
        };
        for row in 0..block.jacobian.nrows() {
            let numeric = (plus[row] - minus[row]) / (2.0 * step);
            let analytic = block.jacobian[(row, col)];
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-8 {
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Points `R X + T` for the given shape, without the depth check.
pub fn transform_points(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    shape: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    shape.iter().map(|x| rotation * x + translation).collect()
}
