//! Domain types shared by every stage of the pipeline.
//!
//! Conventions:
//! - camera frame: x right, y down, z forward (pixels grow with x and y);
//! - canonical object frame: +X forward, +Z up, origin at the mean-shape keypoint centroid;
//! - pixels are square with zero skew, one focal length.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{GroundPoseError, Result};

/// Pinhole intrinsics with a single focal length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub principal_point: Vector2<f64>,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, principal_point: Vector2<f64>) -> Result<Self> {
        let cam = Self {
            focal,
            principal_point,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Principal point at the image center.
    pub fn centered(focal: f64, image_size: Vector2<f64>) -> Result<Self> {
        Self::new(focal, image_size * 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(GroundPoseError::invalid(format!(
                "focal must be positive and finite, got {}",
                self.focal
            )));
        }
        if !(self.principal_point.x.is_finite() && self.principal_point.y.is_finite()) {
            return Err(GroundPoseError::invalid("principal point must be finite"));
        }
        Ok(())
    }

    pub fn with_focal(&self, focal: f64) -> Self {
        Self {
            focal,
            principal_point: self.principal_point,
        }
    }
}

/// Mean keypoint configuration plus a linear deformation basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeAtlas {
    pub keypoint_names: Vec<String>,
    pub mean_shape: Vec<Vector3<f64>>,
    /// `basis[j][i]` is the displacement of keypoint `i` along component `j`.
    pub basis: Vec<Vec<Vector3<f64>>>,
    /// Per-component bound `U_j`.
    pub coeff_bounds: Vec<f64>,
    pub diameter: f64,
}

/// Bound applied to component coefficients when an atlas does not provide one.
pub const DEFAULT_COEFF_BOUND: f64 = 3.0;

impl ShapeAtlas {
    pub fn num_keypoints(&self) -> usize {
        self.mean_shape.len()
    }

    pub fn num_components(&self) -> usize {
        self.basis.len()
    }

    pub fn instantiate(&self, coeffs: &[f64]) -> Result<Vec<Vector3<f64>>> {
        instantiate_shape(self, coeffs)
    }
}

/// Largest distance between any two points.
pub fn max_pairwise_distance(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0_f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm());
        }
    }
    best
}

/// 2D keypoints of one detected object with per-keypoint confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub id: String,
    pub keypoints: Vec<Vector2<f64>>,
    pub scores: Vec<f64>,
}

impl Detection {
    /// Number of keypoints with a positive score.
    pub fn usable_keypoints(&self) -> usize {
        self.scores.iter().filter(|&&s| s > 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints.len() != self.scores.len() {
            return Err(GroundPoseError::Validation(format!(
                "detection {}: {} keypoints but {} scores",
                self.id,
                self.keypoints.len(),
                self.scores.len()
            )));
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(GroundPoseError::Validation(format!(
                "detection {}: score {s} outside [0, 1]",
                self.id
            )));
        }
        if self.keypoints.iter().any(|k| !(k.x.is_finite() && k.y.is_finite())) {
            return Err(GroundPoseError::Validation(format!(
                "detection {}: non-finite keypoint",
                self.id
            )));
        }
        Ok(())
    }
}

/// Pose and shape of one object in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub coeffs: Vec<f64>,
}

impl ObjectState {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, coeffs: Vec<f64>) -> Self {
        Self {
            rotation,
            translation,
            coeffs,
        }
    }

    pub fn rigid(rotation: Matrix3<f64>, translation: Vector3<f64>, components: usize) -> Self {
        Self::new(rotation, translation, vec![0.0; components])
    }

    /// Keypoints of the instantiated shape in the camera frame.
    pub fn camera_points(&self, atlas: &ShapeAtlas) -> Result<Vec<Vector3<f64>>> {
        Ok(atlas
            .instantiate(&self.coeffs)?
            .iter()
            .map(|p| self.rotation * p + self.translation)
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !crate::rotation::is_rotation(&self.rotation, 1e-9) {
            return Err(GroundPoseError::Validation(
                "rotation is not orthonormal with det +1".into(),
            ));
        }
        if !(self.translation.z > 0.0) {
            return Err(GroundPoseError::Validation(format!(
                "translation z must be positive, got {}",
                self.translation.z
            )));
        }
        Ok(())
    }
}

/// Plane `v_a x + v_b y + v_c z + v_d = 0` in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub coeffs: Vector4<f64>,
}

impl Plane {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self {
            coeffs: Vector4::new(a, b, c, d),
        }
    }

    pub fn from_normal_offset(normal: Vector3<f64>, offset: f64) -> Self {
        Self::new(normal.x, normal.y, normal.z, offset)
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.coeffs.fixed_rows::<3>(0).into_owned()
    }

    pub fn offset(&self) -> f64 {
        self.coeffs[3]
    }

    pub fn v_c(&self) -> f64 {
        self.coeffs[2]
    }
}

/// One image worth of detections.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub detections: Vec<Detection>,
    pub intrinsics_hint: Option<CameraIntrinsics>,
    /// Width and height in pixels.
    pub image_size: Vector2<f64>,
}

impl Scene {
    pub fn image_diagonal(&self) -> f64 {
        self.image_size.norm()
    }

    /// Principal point used when no intrinsics hint is present.
    pub fn principal_point(&self) -> Vector2<f64> {
        self.intrinsics_hint
            .map(|c| c.principal_point)
            .unwrap_or(self.image_size * 0.5)
    }

    /// Checks invariants. `margin` is in pixels; keypoints with positive score
    /// must lie within the image grown by the margin.
    pub fn validate(&self, margin: f64) -> Result<()> {
        if !(self.image_size.x > 0.0 && self.image_size.y > 0.0) {
            return Err(GroundPoseError::Validation(format!(
                "image_size must be positive, got [{}, {}]",
                self.image_size.x, self.image_size.y
            )));
        }
        if let Some(cam) = &self.intrinsics_hint {
            cam.validate()?;
        }
        for det in &self.detections {
            det.validate()?;
            for (k, (p, &s)) in det.keypoints.iter().zip(&det.scores).enumerate() {
                let inside = p.x >= -margin
                    && p.y >= -margin
                    && p.x <= self.image_size.x + margin
                    && p.y <= self.image_size.y + margin;
                if s > 0.0 && !inside {
                    return Err(GroundPoseError::Validation(format!(
                        "detection {}: keypoint {k} at ({}, {}) is outside the image margin",
                        det.id, p.x, p.y
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Qualifiers attached to a scene estimate.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    /// Focal length was not updated (fixed by configuration or too few objects).
    pub focal_fixed: bool,
    /// Fewer than three objects: the plane comes from rotations only.
    pub plane_from_rotations_only: bool,
    /// A focal update hit the clamp range at least once.
    pub focal_clamped: bool,
    /// A focal update was skipped because the translation plane was parallel to the optical axis.
    pub focal_unobservable: bool,
}

/// An object that could not be estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFailure {
    pub index: usize,
    pub id: String,
    pub message: String,
}

/// Result of a joint scene solve, aligned with the scene's detections.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEstimate {
    pub ids: Vec<String>,
    /// `None` for objects that failed.
    pub objects: Vec<Option<ObjectState>>,
    pub plane: Plane,
    pub intrinsics: CameraIntrinsics,
    pub per_object_loss: Vec<Option<f64>>,
    /// Consensus membership of each object in the final plane fit.
    pub plane_inliers: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub flags: EstimateFlags,
    pub failures: Vec<ObjectFailure>,
}

/// How coefficient bounds `U_j` are turned into a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffBoundMode {
    /// `[-U_j, U_j]`
    #[default]
    Symmetric,
    /// `[0, U_j]`
    NonNegative,
}

impl CoeffBoundMode {
    pub fn interval(self, bound: f64) -> (f64, f64) {
        match self {
            CoeffBoundMode::Symmetric => (-bound, bound),
            CoeffBoundMode::NonNegative => (0.0, bound),
        }
    }

    pub fn clamp(self, value: f64, bound: f64) -> f64 {
        let (lo, hi) = self.interval(bound);
        value.clamp(lo, hi)
    }
}

/// Geometric weight growth: 0 at iteration 0, then `initial * growth^(k-1)` up to `cap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub initial: f64,
    pub growth: f64,
    pub cap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacSettings {
    pub iterations: usize,
    /// Inlier distance threshold as a multiple of the atlas diameter.
    pub distance_threshold_diameters: f64,
    /// Inlier angle threshold between up-axes, radians.
    pub angle_threshold: f64,
    pub seed: u64,
}

impl Default for RansacSettings {
    fn default() -> Self {
        Self {
            iterations: 500,
            distance_threshold_diameters: 0.15,
            angle_threshold: 10f64.to_radians(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalMode {
    /// Refine the focal length from the two consensus planes.
    #[default]
    Estimate,
    /// Keep the initial (hinted) focal length.
    Fixed,
}

/// Direction of the plane-ratio focal correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalRule {
    /// `f <- v_c(translations) / v_c(rotations) * f`; shrinks the focal when the
    /// translation plane looks flatter than the up-axes say it is.
    #[default]
    TranslationOverRotation,
    /// `f <- v_c(rotations) / v_c(translations) * f`; pushes a wrong focal
    /// further from the truth and is kept for comparison.
    RotationOverTranslation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Tikhonov weight on shape coefficients.
    pub mu_shape: f64,
    pub mu1_schedule: WeightSchedule,
    pub mu2_schedule: WeightSchedule,
    /// Outer (consensus) iterations.
    pub max_iters: usize,
    /// Relative change of the total loss below which the outer loop stops.
    pub convergence_tol: f64,
    /// Relative focal change below which the focal is considered settled.
    pub focal_tol: f64,
    /// Alternations inside one per-object solve.
    pub inner_max_iters: usize,
    pub inner_tol: f64,
    pub ransac: RansacSettings,
    pub coeff_bound_mode: CoeffBoundMode,
    /// After each pose/shape alternation, also try one damped step on pose and
    /// coefficients together; depth and length-like components are strongly
    /// coupled and plain alternation crawls along that valley.
    pub coupled_step: bool,
    pub focal_mode: FocalMode,
    pub focal_rule: FocalRule,
    /// While the focal is estimated, fit the consensus planes to a plane-free
    /// copy of the objects that is rescaled and re-solved alongside the
    /// constrained one. The plane terms pull translations and up-axes toward
    /// the same plane, which hides the disagreement the focal update measures
    /// and ties the constrained objects to planes fitted at stale focals.
    /// Unregularized depths are noisy, so this pays off only for near-exact
    /// keypoints.
    pub focal_from_plane_free: bool,
    /// Initial log-focal step of the plane-agreement search that backs up the
    /// ratio update; halved whenever no move improves agreement. Zero leaves
    /// only the ratio update.
    pub focal_search_step: f64,
    /// `false` runs the plane-free solver (weights stay zero, no consensus loop).
    pub use_plane: bool,
    /// Keypoints below this score are left out of the linear initialization.
    pub dlt_min_score: f64,
    /// Minimum `|v_c|` of the translation plane for a focal update.
    pub focal_eps: f64,
    /// Focal clamp range as multiples of the image diagonal.
    pub focal_clamp: (f64, f64),
    /// Range of the random focal initialization, multiples of the image diagonal.
    pub focal_init_range: (f64, f64),
    /// Seed for the random focal and plane initialization.
    pub seed: u64,
    /// Allowed keypoint excursion outside the image, pixels.
    pub keypoint_margin: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mu_shape: 1.0,
            mu1_schedule: WeightSchedule {
                initial: 1.0,
                growth: 2.0,
                cap: 1.0e3,
            },
            mu2_schedule: WeightSchedule {
                initial: 10.0,
                growth: 2.0,
                cap: 1.0e4,
            },
            max_iters: 30,
            convergence_tol: 1e-6,
            focal_tol: 1e-3,
            inner_max_iters: 50,
            inner_tol: 1e-8,
            ransac: RansacSettings::default(),
            coeff_bound_mode: CoeffBoundMode::Symmetric,
            coupled_step: true,
            focal_mode: FocalMode::Estimate,
            focal_rule: FocalRule::default(),
            focal_from_plane_free: false,
            focal_search_step: 0.1,
            use_plane: true,
            dlt_min_score: 0.05,
            focal_eps: 1e-3,
            focal_clamp: (0.1, 10.0),
            focal_init_range: (0.5, 2.0),
            seed: 0,
            keypoint_margin: 50.0,
        }
    }
}

/// `mean_shape + sum_j coeffs[j] * basis[j]`, per keypoint.
pub fn instantiate_shape(atlas: &ShapeAtlas, coeffs: &[f64]) -> Result<Vec<Vector3<f64>>> {
    if coeffs.len() != atlas.num_components() {
        return Err(GroundPoseError::invalid(format!(
            "expected {} shape coefficients, got {}",
            atlas.num_components(),
            coeffs.len()
        )));
    }
    let mut points = atlas.mean_shape.clone();
    for (component, &c) in atlas.basis.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        for (p, v) in points.iter_mut().zip(component) {
            *p += v * c;
        }
    }
    Ok(points)
}

/// One reason an atlas fails its invariants.
#[derive(Debug, Clone, PartialEq)]
pub enum AtlasViolation {
    Dimensions(String),
    NonFinite(String),
    NotOrthogonal { first: usize, second: usize, cosine: f64 },
    DiameterMismatch { stated: f64, actual: f64 },
    NegativeBound { component: usize, bound: f64 },
}

impl std::fmt::Display for AtlasViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AtlasViolation::Dimensions(m) => write!(f, "dimensions: {m}"),
            AtlasViolation::NonFinite(m) => write!(f, "non-finite value in {m}"),
            AtlasViolation::NotOrthogonal {
                first,
                second,
                cosine,
            } => write!(
                f,
                "basis components {first} and {second} are not orthogonal (cosine {cosine:.3e})"
            ),
            AtlasViolation::DiameterMismatch { stated, actual } => write!(
                f,
                "diameter {stated} differs from max pairwise keypoint distance {actual}"
            ),
            AtlasViolation::NegativeBound { component, bound } => {
                write!(f, "coefficient bound {component} is negative ({bound})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<AtlasViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let text: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        Err(GroundPoseError::Validation(text.join("; ")))
    }
}

const ORTHOGONALITY_TOL: f64 = 1e-6;
const DIAMETER_TOL: f64 = 1e-9;

/// Collects every invariant violation of `atlas`; an empty report means valid.
pub fn validate_atlas(atlas: &ShapeAtlas) -> ValidationReport {
    let mut violations = Vec::new();
    let n = atlas.num_keypoints();
    let m = atlas.num_components();
    if n < 6 {
        violations.push(AtlasViolation::Dimensions(format!(
            "need at least 6 keypoints, got {n}"
        )));
    }
    if m < 1 {
        violations.push(AtlasViolation::Dimensions(
            "need at least one deformation component".into(),
        ));
    }
    if atlas.keypoint_names.len() != n {
        violations.push(AtlasViolation::Dimensions(format!(
            "{} keypoint names for {n} keypoints",
            atlas.keypoint_names.len()
        )));
    }
    if atlas.coeff_bounds.len() != m {
        violations.push(AtlasViolation::Dimensions(format!(
            "{} coefficient bounds for {m} components",
            atlas.coeff_bounds.len()
        )));
    }
    for (j, &u) in atlas.coeff_bounds.iter().enumerate() {
        if !u.is_finite() {
            violations.push(AtlasViolation::NonFinite(format!("coeff_bounds[{j}]")));
        } else if u < 0.0 {
            violations.push(AtlasViolation::NegativeBound {
                component: j,
                bound: u,
            });
        }
    }
    let finite = |p: &Vector3<f64>| p.iter().all(|v| v.is_finite());
    if !atlas.mean_shape.iter().all(finite) {
        violations.push(AtlasViolation::NonFinite("mean_shape".into()));
    }
    let mut shaped = true;
    for (j, comp) in atlas.basis.iter().enumerate() {
        if comp.len() != n {
            shaped = false;
            violations.push(AtlasViolation::Dimensions(format!(
                "basis component {j} has {} vectors, expected {n}",
                comp.len()
            )));
        }
        if !comp.iter().all(finite) {
            shaped = false;
            violations.push(AtlasViolation::NonFinite(format!("basis[{j}]")));
        }
    }
    if shaped {
        for a in 0..m {
            for b in a + 1..m {
                let dot: f64 = atlas.basis[a]
                    .iter()
                    .zip(&atlas.basis[b])
                    .map(|(u, v)| u.dot(v))
                    .sum();
                let na: f64 = atlas.basis[a].iter().map(|u| u.norm_squared()).sum::<f64>().sqrt();
                let nb: f64 = atlas.basis[b].iter().map(|u| u.norm_squared()).sum::<f64>().sqrt();
                let cosine = if na > 0.0 && nb > 0.0 {
                    dot / (na * nb)
                } else {
                    0.0
                };
                if cosine.abs() > ORTHOGONALITY_TOL {
                    violations.push(AtlasViolation::NotOrthogonal {
                        first: a,
                        second: b,
                        cosine,
                    });
                }
            }
        }
    }
    let actual = max_pairwise_distance(&atlas.mean_shape);
    if !(atlas.diameter > 0.0)
        || (atlas.diameter - actual).abs() > DIAMETER_TOL * actual.max(1.0)
    {
        violations.push(AtlasViolation::DiameterMismatch {
            stated: atlas.diameter,
            actual,
        });
    }
    ValidationReport { violations }
}

/// Canonical up axis of the object frame.
pub const CANONICAL_UP: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

/// The object's vertical axis expressed in the camera frame.
pub fn object_up_axis(state: &ObjectState) -> Vector3<f64> {
    (state.rotation * CANONICAL_UP).normalize()
}
