//! Seeded synthetic scenes with exact ground truth: a tilted ground plane,
//! cars standing on it, projected keypoints, optional noise and outliers.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GroundPoseError, Result};
use crate::projection::project_point;
use crate::rotation;
use crate::scene_model::{
    max_pairwise_distance, object_up_axis, CameraIntrinsics, CoeffBoundMode, Detection,
    EstimateFlags, ObjectState, Plane, Scene, SceneEstimate, ShapeAtlas, DEFAULT_COEFF_BOUND,
};

/// Relative standard deviation of the length and height components.
const SHAPE_STD: f64 = 0.07;

/// A 12-keypoint car: wheels, lights and roof corners; components scale
/// length (x) and height (z) by one standard deviation each.
pub fn car_atlas() -> ShapeAtlas {
    let raw: [(&str, [f64; 3]); 12] = [
        ("wheel_front_left", [1.35, 0.80, 0.33]),
        ("wheel_front_right", [1.35, -0.80, 0.33]),
        ("wheel_rear_left", [-1.35, 0.80, 0.33]),
        ("wheel_rear_right", [-1.35, -0.80, 0.33]),
        ("headlight_left", [2.20, 0.65, 0.70]),
        ("headlight_right", [2.20, -0.65, 0.70]),
        ("taillight_left", [-2.20, 0.65, 0.80]),
        ("taillight_right", [-2.20, -0.65, 0.80]),
        ("roof_front_left", [0.50, 0.60, 1.45]),
        ("roof_front_right", [0.50, -0.60, 1.45]),
        ("roof_rear_left", [-0.80, 0.60, 1.45]),
        ("roof_rear_right", [-0.80, -0.60, 1.45]),
    ];
    let pts: Vec<Vector3<f64>> = raw.iter().map(|(_, p)| Vector3::from(*p)).collect();
    let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mean_shape: Vec<Vector3<f64>> = pts.iter().map(|p| p - centroid).collect();
    let length = mean_shape
        .iter()
        .map(|p| Vector3::new(SHAPE_STD * p.x, 0.0, 0.0))
        .collect();
    let height = mean_shape
        .iter()
        .map(|p| Vector3::new(0.0, 0.0, SHAPE_STD * p.z))
        .collect();
    let diameter = max_pairwise_distance(&mean_shape);
    ShapeAtlas {
        keypoint_names: raw.iter().map(|(n, _)| n.to_string()).collect(),
        mean_shape,
        basis: vec![length, height],
        coeff_bounds: vec![DEFAULT_COEFF_BOUND; 2],
        diameter,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_objects: usize,
    /// Width and height, pixels.
    pub image_size: [f64; 2],
    pub focal_range: [f64; 2],
    /// Camera pitch below the horizon, radians.
    pub plane_tilt_range: [f64; 2],
    /// Maximum absolute camera roll, radians.
    pub max_roll: f64,
    /// Distance from the camera to the plane of object centers, object units.
    pub plane_distance_range: [f64; 2],
    /// Object depth (camera z), object units.
    pub depth_range: [f64; 2],
    pub keypoint_noise_sigma: f64,
    /// Probability of zeroing each keypoint score (at least 6 stay visible).
    pub keypoint_drop_fraction: f64,
    /// Fraction of objects lifted and tilted off the plane.
    pub outlier_fraction: f64,
    pub coeff_sigma: f64,
    pub coeff_bound_mode: CoeffBoundMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_objects: 10,
            image_size: [1920.0, 1080.0],
            focal_range: [1000.0, 1600.0],
            plane_tilt_range: [0.35, 0.6],
            max_roll: 0.05,
            plane_distance_range: [6.0, 10.0],
            depth_range: [12.0, 40.0],
            keypoint_noise_sigma: 0.0,
            keypoint_drop_fraction: 0.0,
            outlier_fraction: 0.0,
            coeff_sigma: 1.0,
            coeff_bound_mode: CoeffBoundMode::Symmetric,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// Objects lifted off and tilted against the plane before projection.
    Pose,
    /// Keypoints moved to uniform random image positions.
    Keypoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub truth: SceneEstimate,
    /// Per object: planted pose outlier.
    pub object_outliers: Vec<bool>,
    /// Per object and keypoint: planted keypoint outlier.
    pub keypoint_outliers: Vec<Vec<bool>>,
}

const MAX_ATTEMPTS: usize = 1000;

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Rotation whose third column is `up` and first column is the camera x axis
/// projected onto the plane.
fn plane_frame(up: &Vector3<f64>) -> Matrix3<f64> {
    let x = Vector3::x();
    let e1 = (x - up * up.dot(&x)).normalize();
    let e2 = up.cross(&e1);
    Matrix3::from_columns(&[e1, e2, *up])
}

fn project_all(state: &ObjectState, atlas: &ShapeAtlas, cam: &CameraIntrinsics) -> Option<Vec<Vector2<f64>>> {
    let pts = state.camera_points(atlas).ok()?;
    pts.iter().map(|p| project_point(p, cam).ok()).collect()
}

fn inside(points: &[Vector2<f64>], size: &Vector2<f64>) -> bool {
    points
        .iter()
        .all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= size.x && p.y <= size.y)
}

/// Builds a scene from `config`, including noise, dropped keypoints and pose
/// outliers when the config asks for them.
pub fn generate_scene(atlas: &ShapeAtlas, config: &SynthConfig) -> Result<SyntheticScene> {
    crate::scene_model::validate_atlas(atlas).into_result()?;
    if config.n_objects == 0 {
        return Err(GroundPoseError::invalid("n_objects must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let image_size = Vector2::new(config.image_size[0], config.image_size[1]);
    let focal = uniform(&mut rng, config.focal_range);
    let cam = CameraIntrinsics::centered(focal, image_size)?;
    let pitch = uniform(&mut rng, config.plane_tilt_range);
    let roll = uniform(&mut rng, [-config.max_roll, config.max_roll]);
    let up = rotation::exp(&Vector3::new(0.0, 0.0, roll)) * Vector3::new(0.0, -pitch.cos(), -pitch.sin());
    let offset = uniform(&mut rng, config.plane_distance_range);
    let plane = Plane::from_normal_offset(up, offset);
    let frame = plane_frame(&up);
    let coeff_noise = Normal::new(0.0, config.coeff_sigma.max(0.0))
        .map_err(|e| GroundPoseError::invalid(e.to_string()))?;

    let mut states: Vec<ObjectState> = Vec::with_capacity(config.n_objects);
    let mut attempts = 0;
    while states.len() < config.n_objects {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(GroundPoseError::Generation(format!(
                "placed {} of {} objects in {MAX_ATTEMPTS} attempts",
                states.len(),
                config.n_objects
            )));
        }
        let z = uniform(&mut rng, config.depth_range);
        let u = rng.random_range(0.0..image_size.x);
        let x = (u - cam.principal_point.x) / focal * z;
        if up.y.abs() < 1e-9 {
            return Err(GroundPoseError::Generation("plane normal has no vertical component".into()));
        }
        let y = -(up.x * x + up.z * z + offset) / up.y;
        let translation = Vector3::new(x, y, z);
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let rotation = frame * rotation::exp(&Vector3::new(0.0, 0.0, yaw));
        let coeffs: Vec<f64> = atlas
            .coeff_bounds
            .iter()
            .map(|&b| config.coeff_bound_mode.clamp(coeff_noise.sample(&mut rng), b))
            .collect();
        let state = ObjectState::new(rotation, translation, coeffs);
        let Some(pixels) = project_all(&state, atlas, &cam) else {
            continue;
        };
        if !inside(&pixels, &image_size) {
            continue;
        }
        let crowded = states
            .iter()
            .any(|s| (s.translation - translation).norm() < 0.6 * atlas.diameter);
        if crowded {
            continue;
        }
        states.push(state);
    }

    let n = states.len();
    let detections = states
        .iter()
        .enumerate()
        .map(|(k, s)| Detection {
            id: format!("car_{k}"),
            keypoints: project_all(s, atlas, &cam).expect("checked above"),
            scores: vec![1.0; atlas.num_keypoints()],
        })
        .collect();
    let truth = SceneEstimate {
        ids: (0..n).map(|k| format!("car_{k}")).collect(),
        objects: states.into_iter().map(Some).collect(),
        plane,
        intrinsics: cam,
        per_object_loss: vec![Some(0.0); n],
        plane_inliers: vec![true; n],
        converged: true,
        iterations: 0,
        flags: EstimateFlags::default(),
        failures: Vec::new(),
    };
    let mut synthetic = SyntheticScene {
        scene: Scene {
            detections,
            intrinsics_hint: None,
            image_size,
        },
        truth,
        object_outliers: vec![false; n],
        keypoint_outliers: vec![vec![false; atlas.num_keypoints()]; n],
    };

    if config.outlier_fraction > 0.0 {
        synthetic = plant_outliers(&synthetic, atlas, config.outlier_fraction, OutlierMode::Pose, rng.next_u64())?;
    }
    if config.keypoint_drop_fraction > 0.0 {
        synthetic.scene = drop_keypoints(&synthetic.scene, config.keypoint_drop_fraction, rng.next_u64());
    }
    if config.keypoint_noise_sigma > 0.0 {
        synthetic.scene = perturb_keypoints(&synthetic.scene, config.keypoint_noise_sigma, rng.next_u64())?;
    }
    Ok(synthetic)
}

/// Zeroes each keypoint score with probability `fraction`, keeping at least
/// six visible keypoints per detection.
pub fn drop_keypoints(scene: &Scene, fraction: f64, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    for det in out.detections.iter_mut() {
        let mut visible = det.usable_keypoints();
        for s in det.scores.iter_mut() {
            let drop = rng.random::<f64>() < fraction;
            if drop && *s > 0.0 && visible > 6 {
                *s = 0.0;
                visible -= 1;
            }
        }
    }
    out
}

/// Adds isotropic Gaussian pixel noise; visible keypoints get the score
/// `clamp(1 - |noise| / (3 sigma), 0.05, 1)`.
pub fn perturb_keypoints(scene: &Scene, sigma: f64, seed: u64) -> Result<Scene> {
    if !(sigma >= 0.0) {
        return Err(GroundPoseError::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(scene.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| GroundPoseError::invalid(e.to_string()))?;
    let mut out = scene.clone();
    for det in out.detections.iter_mut() {
        for (k, s) in det.keypoints.iter_mut().zip(det.scores.iter_mut()) {
            let noise = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
            *k += noise;
            if *s > 0.0 {
                *s = (1.0 - noise.norm() / (3.0 * sigma)).clamp(0.05, 1.0);
            }
        }
    }
    Ok(out)
}

const MAX_OUTLIER_TRIES: usize = 200;

/// Plants `round(fraction * N)` outliers and records their labels.
pub fn plant_outliers(
    synthetic: &SyntheticScene,
    atlas: &ShapeAtlas,
    fraction: f64,
    mode: OutlierMode,
    seed: u64,
) -> Result<SyntheticScene> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(GroundPoseError::invalid(format!(
            "outlier fraction must lie in [0, 0.5], got {fraction}"
        )));
    }
    let mut out = synthetic.clone();
    if fraction == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = out.truth.intrinsics;
    match mode {
        OutlierMode::Pose => {
            let n = out.truth.objects.len();
            let count = (fraction * n as f64).round() as usize;
            let mut chosen: Vec<usize> = sample(&mut rng, n, count.min(n)).into_vec();
            chosen.sort_unstable();
            let up = out.truth.plane.normal().normalize();
            for k in chosen {
                let base = out.truth.objects[k].clone().expect("ground truth is complete");
                let mut placed = None;
                for _ in 0..MAX_OUTLIER_TRIES {
                    let lift = rng.random_range(0.3..1.0) * atlas.diameter;
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let tilt = rng.random_range(15f64.to_radians()..40f64.to_radians());
                    let heading = rng.random_range(0.0..std::f64::consts::TAU);
                    let axis = plane_frame(&up) * Vector3::new(heading.cos(), heading.sin(), 0.0);
                    let state = ObjectState::new(
                        rotation::exp(&(axis * tilt)) * base.rotation,
                        base.translation + up * (sign * lift),
                        base.coeffs.clone(),
                    );
                    if let Some(px) = project_all(&state, atlas, &cam) {
                        if inside(&px, &out.scene.image_size) {
                            placed = Some((state, px));
                            break;
                        }
                    }
                }
                let Some((state, pixels)) = placed else {
                    return Err(GroundPoseError::Generation(format!(
                        "could not keep outlier object {k} inside the image"
                    )));
                };
                out.scene.detections[k].keypoints = pixels;
                out.truth.objects[k] = Some(state);
                out.truth.plane_inliers[k] = false;
                out.object_outliers[k] = true;
            }
        }
        OutlierMode::Keypoint => {
            let size = out.scene.image_size;
            for (det, labels) in out.scene.detections.iter_mut().zip(out.keypoint_outliers.iter_mut()) {
                for (kp, label) in det.keypoints.iter_mut().zip(labels.iter_mut()) {
                    if rng.random::<f64>() < fraction {
                        *kp = Vector2::new(rng.random_range(0.0..size.x), rng.random_range(0.0..size.y));
                        *label = true;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// True when every ground-truth object sits on the plane with its up axis along the normal.
pub fn objects_on_plane(truth: &SceneEstimate, tol: f64) -> bool {
    truth.objects.iter().flatten().all(|s| {
        let d = crate::plane_consensus::point_plane_distance(&s.translation, &truth.plane).unwrap_or(f64::INFINITY);
        let a = crate::plane_consensus::normal_angle(&object_up_axis(s), &truth.plane).unwrap_or(f64::INFINITY);
        d.abs() <= tol && a <= tol
    })
}
