//! Focal-length correction from the disagreement between the translation
//! plane and the up-axis plane, and the depth rescaling that keeps the
//! weak-perspective reprojection unchanged.

use crate::error::{GroundPoseError, Result};
use crate::scene_model::{FocalRule, ObjectState, Plane};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalUpdateConfig {
    pub rule: FocalRule,
    /// Minimum `|v_c|` of either plane.
    pub eps: f64,
    /// Absolute clamp range in pixels.
    pub min_focal: f64,
    pub max_focal: f64,
}

impl FocalUpdateConfig {
    /// Clamp range `[lo, hi] * image_diagonal`.
    pub fn for_image(rule: FocalRule, eps: f64, clamp: (f64, f64), image_diagonal: f64) -> Self {
        Self {
            rule,
            eps,
            min_focal: clamp.0 * image_diagonal,
            max_focal: clamp.1 * image_diagonal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalUpdate {
    pub focal: f64,
    /// `new / old`, after clamping.
    pub ratio: f64,
    pub clamped: bool,
}

/// Ratio update of the focal length from two normalized planes.
///
/// With [`FocalRule::RotationOverTranslation`] this is
/// `f * v_c(plane_r) / v_c(plane_t)`; [`FocalRule::TranslationOverRotation`]
/// uses the reciprocal ratio. The result is clamped to the configured range.
pub fn focal_update(
    plane_t: &Plane,
    plane_r: &Plane,
    focal: f64,
    config: &FocalUpdateConfig,
) -> Result<FocalUpdate> {
    if !(focal > 0.0) {
        return Err(GroundPoseError::invalid(format!("focal must be positive, got {focal}")));
    }
    let (vt, vr) = (plane_t.v_c(), plane_r.v_c());
    for v in [vt, vr] {
        if !(v.abs() > config.eps) {
            return Err(GroundPoseError::UnobservableFocal { v_c: v, eps: config.eps });
        }
    }
    let ratio = match config.rule {
        FocalRule::RotationOverTranslation => vr / vt,
        FocalRule::TranslationOverRotation => vt / vr,
    };
    if !(ratio > 0.0) {
        return Err(GroundPoseError::Degenerate(format!(
            "planes disagree in orientation (v_c = {vt} vs {vr})"
        )));
    }
    let raw = ratio * focal;
    let new_focal = raw.clamp(config.min_focal, config.max_focal);
    Ok(FocalUpdate {
        focal: new_focal,
        ratio: new_focal / focal,
        clamped: new_focal != raw,
    })
}

/// Multiplies the translation depth by `scale`; rotation, shape and x, y are kept.
pub fn depth_rescale(state: &ObjectState, scale: f64) -> Result<ObjectState> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(GroundPoseError::invalid(format!(
            "depth scale must be positive, got {scale}"
        )));
    }
    let mut out = state.clone();
    out.translation.z *= scale;
    Ok(out)
}

/// The plane seen by points after their depth is multiplied by `scale`.
pub fn rescale_plane_depth(plane: &Plane, scale: f64) -> Plane {
    let mut coeffs = plane.coeffs;
    coeffs[2] /= scale;
    Plane { coeffs }
}
