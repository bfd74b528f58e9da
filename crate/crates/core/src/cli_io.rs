//! JSON documents for scenes, atlases, estimates, configs, diagnostics and
//! trajectories. Every document carries `"schema_version": 1`; matrices are
//! row-major nested arrays.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GroundPoseError, Result};
use crate::joint_solver::IterationDiagnostics;
use crate::scene_model::{
    max_pairwise_distance, validate_atlas, CameraIntrinsics, Detection, EstimateFlags,
    ObjectFailure, ObjectState, Plane, Scene, SceneEstimate, ShapeAtlas, SolverConfig,
    DEFAULT_COEFF_BOUND,
};
use crate::synth_oracle::SynthConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrinsicsDoc {
    pub focal: f64,
    pub principal_point: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionDoc {
    pub id: String,
    pub keypoints: Vec<[f64; 2]>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDoc {
    pub schema_version: u32,
    pub image_size: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics_hint: Option<IntrinsicsDoc>,
    pub detections: Vec<DetectionDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasDoc {
    pub schema_version: u32,
    pub keypoint_names: Vec<String>,
    pub mean_shape: Vec<[f64; 3]>,
    /// One list of per-keypoint offsets per component.
    pub basis: Vec<Vec<[f64; 3]>>,
    /// Defaults to 3 for every component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeff_bounds: Option<Vec<f64>>,
    /// Defaults to the largest pairwise distance of the mean shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diameter: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectDoc {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateDoc {
    pub schema_version: u32,
    pub ids: Vec<String>,
    pub objects: Vec<Option<ObjectDoc>>,
    /// `[a, b, c, d]` of `a x + b y + c z + d = 0`.
    pub plane: [f64; 4],
    pub intrinsics: IntrinsicsDoc,
    pub per_object_loss: Vec<Option<f64>>,
    pub plane_inliers: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub flags: EstimateFlags,
    pub failures: Vec<ObjectFailure>,
    /// Planted pose outliers; present in synthetic ground truth only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_outliers: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsDoc {
    pub iteration: usize,
    pub total_loss: f64,
    pub focal: f64,
    pub plane: [f64; 4],
    pub mu1: f64,
    pub mu2: f64,
    pub inlier_counts: [usize; 2],
    pub max_plane_residual: f64,
    pub resolve_loss_before: f64,
    pub resolve_loss_after: f64,
}

impl From<&CameraIntrinsics> for IntrinsicsDoc {
    fn from(c: &CameraIntrinsics) -> Self {
        Self {
            focal: c.focal,
            principal_point: [c.principal_point.x, c.principal_point.y],
        }
    }
}

impl IntrinsicsDoc {
    fn to_model(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.focal, Vector2::from(self.principal_point))
            .map_err(|e| GroundPoseError::Validation(e.to_string()))
    }
}

impl From<&Scene> for SceneDoc {
    fn from(s: &Scene) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            image_size: [s.image_size.x, s.image_size.y],
            intrinsics_hint: s.intrinsics_hint.as_ref().map(IntrinsicsDoc::from),
            detections: s
                .detections
                .iter()
                .map(|d| DetectionDoc {
                    id: d.id.clone(),
                    keypoints: d.keypoints.iter().map(|k| [k.x, k.y]).collect(),
                    scores: d.scores.clone(),
                })
                .collect(),
        }
    }
}

impl SceneDoc {
    pub fn to_model(&self) -> Result<Scene> {
        check_version(self.schema_version)?;
        let scene = Scene {
            detections: self
                .detections
                .iter()
                .map(|d| Detection {
                    id: d.id.clone(),
                    keypoints: d.keypoints.iter().map(|k| Vector2::from(*k)).collect(),
                    scores: d.scores.clone(),
                })
                .collect(),
            intrinsics_hint: self.intrinsics_hint.as_ref().map(IntrinsicsDoc::to_model).transpose()?,
            image_size: Vector2::from(self.image_size),
        };
        scene.validate(f64::INFINITY).map_err(as_validation)?;
        Ok(scene)
    }
}

impl From<&ShapeAtlas> for AtlasDoc {
    fn from(a: &ShapeAtlas) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            keypoint_names: a.keypoint_names.clone(),
            mean_shape: a.mean_shape.iter().map(|p| [p.x, p.y, p.z]).collect(),
            basis: a
                .basis
                .iter()
                .map(|c| c.iter().map(|p| [p.x, p.y, p.z]).collect())
                .collect(),
            coeff_bounds: Some(a.coeff_bounds.clone()),
            diameter: Some(a.diameter),
        }
    }
}

impl AtlasDoc {
    pub fn to_model(&self) -> Result<ShapeAtlas> {
        check_version(self.schema_version)?;
        let mean_shape: Vec<Vector3<f64>> = self.mean_shape.iter().map(|p| Vector3::from(*p)).collect();
        let atlas = ShapeAtlas {
            keypoint_names: self.keypoint_names.clone(),
            basis: self
                .basis
                .iter()
                .map(|c| c.iter().map(|p| Vector3::from(*p)).collect())
                .collect(),
            coeff_bounds: self
                .coeff_bounds
                .clone()
                .unwrap_or_else(|| vec![DEFAULT_COEFF_BOUND; self.basis.len()]),
            diameter: self.diameter.unwrap_or_else(|| max_pairwise_distance(&mean_shape)),
            mean_shape,
        };
        validate_atlas(&atlas).into_result().map_err(as_validation)?;
        Ok(atlas)
    }
}

fn object_doc(s: &ObjectState) -> ObjectDoc {
    let r = &s.rotation;
    ObjectDoc {
        rotation: [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        translation: [s.translation.x, s.translation.y, s.translation.z],
        coeffs: s.coeffs.clone(),
    }
}

impl ObjectDoc {
    pub fn to_model(&self) -> ObjectState {
        let r = &self.rotation;
        ObjectState::new(
            Matrix3::from_fn(|i, j| r[i][j]),
            Vector3::from(self.translation),
            self.coeffs.clone(),
        )
    }
}

impl EstimateDoc {
    pub fn from_model(e: &SceneEstimate, object_outliers: Option<Vec<bool>>) -> Self {
        let p = e.plane.coeffs;
        Self {
            schema_version: SCHEMA_VERSION,
            ids: e.ids.clone(),
            objects: e.objects.iter().map(|o| o.as_ref().map(object_doc)).collect(),
            plane: [p[0], p[1], p[2], p[3]],
            intrinsics: IntrinsicsDoc::from(&e.intrinsics),
            per_object_loss: e.per_object_loss.clone(),
            plane_inliers: e.plane_inliers.clone(),
            converged: e.converged,
            iterations: e.iterations,
            flags: e.flags.clone(),
            failures: e.failures.clone(),
            object_outliers,
        }
    }

    pub fn to_model(&self) -> Result<SceneEstimate> {
        check_version(self.schema_version)?;
        let n = self.ids.len();
        if self.objects.len() != n || self.per_object_loss.len() != n || self.plane_inliers.len() != n {
            return Err(GroundPoseError::Validation(format!(
                "estimate arrays disagree in length: ids {n}, objects {}, per_object_loss {}, plane_inliers {}",
                self.objects.len(),
                self.per_object_loss.len(),
                self.plane_inliers.len()
            )));
        }
        let objects: Vec<Option<ObjectState>> = self.objects.iter().map(|o| o.as_ref().map(ObjectDoc::to_model)).collect();
        for s in objects.iter().flatten() {
            s.validate().map_err(as_validation)?;
        }
        Ok(SceneEstimate {
            ids: self.ids.clone(),
            objects,
            plane: Plane {
                coeffs: Vector4::from(self.plane),
            },
            intrinsics: self.intrinsics.to_model()?,
            per_object_loss: self.per_object_loss.clone(),
            plane_inliers: self.plane_inliers.clone(),
            converged: self.converged,
            iterations: self.iterations,
            flags: self.flags.clone(),
            failures: self.failures.clone(),
        })
    }
}

impl From<&IterationDiagnostics> for DiagnosticsDoc {
    fn from(d: &IterationDiagnostics) -> Self {
        let p = d.plane.coeffs;
        Self {
            iteration: d.iteration,
            total_loss: d.total_loss,
            focal: d.focal,
            plane: [p[0], p[1], p[2], p[3]],
            mu1: d.mu1,
            mu2: d.mu2,
            inlier_counts: d.inlier_counts,
            max_plane_residual: d.max_plane_residual,
            resolve_loss_before: d.resolve_loss_before,
            resolve_loss_after: d.resolve_loss_after,
        }
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(GroundPoseError::Validation(format!(
            "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

fn as_validation(e: GroundPoseError) -> GroundPoseError {
    match e {
        GroundPoseError::Validation(_) => e,
        other => GroundPoseError::Validation(other.to_string()),
    }
}

/// Deserializes `text`, reporting the JSON path of the offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str, source: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let parsed: std::result::Result<T, _> = serde_path_to_error::deserialize(&mut de);
    let value = parsed.map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        let field = match message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
            Some(missing) if path == "." => missing.to_string(),
            Some(missing) => format!("{path}.{missing}"),
            None => path,
        };
        GroundPoseError::Parse {
            location: format!("{source}:{}:{}", inner.line(), inner.column()),
            field,
            message,
        }
    })?;
    de.end().map_err(|e| GroundPoseError::Parse {
        location: format!("{source}:{}:{}", e.line(), e.column()),
        field: ".".into(),
        message: e.to_string(),
    })?;
    Ok(value)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| GroundPoseError::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn io_err(path: &Path, e: std::io::Error) -> GroundPoseError {
    GroundPoseError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read(path)?, &path.display().to_string())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    load::<SceneDoc>(path)?.to_model()
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    write(path, &to_json(&SceneDoc::from(scene))?)
}

pub fn load_atlas(path: &Path) -> Result<ShapeAtlas> {
    load::<AtlasDoc>(path)?.to_model()
}

pub fn save_atlas(atlas: &ShapeAtlas, path: &Path) -> Result<()> {
    write(path, &to_json(&AtlasDoc::from(atlas))?)
}

pub fn load_estimate(path: &Path) -> Result<SceneEstimate> {
    load::<EstimateDoc>(path)?.to_model()
}

/// Estimate plus the planted outlier labels, if the file has them.
pub fn load_truth(path: &Path) -> Result<(SceneEstimate, Option<Vec<bool>>)> {
    let doc = load::<EstimateDoc>(path)?;
    Ok((doc.to_model()?, doc.object_outliers))
}

pub fn save_estimate(estimate: &SceneEstimate, path: &Path) -> Result<()> {
    write(path, &to_json(&EstimateDoc::from_model(estimate, None))?)
}

pub fn save_truth(truth: &SceneEstimate, object_outliers: &[bool], path: &Path) -> Result<()> {
    write(path, &to_json(&EstimateDoc::from_model(truth, Some(object_outliers.to_vec())))?)
}

/// Solver configuration; fields left out take their defaults.
pub fn load_solver_config(path: &Path) -> Result<SolverConfig> {
    load(path)
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    load(path)
}

/// One JSON object per line.
pub fn diagnostics_to_jsonl(diagnostics: &[IterationDiagnostics]) -> Result<String> {
    let mut out = String::new();
    for d in diagnostics {
        out.push_str(&serde_json::to_string(&DiagnosticsDoc::from(d)).map_err(|e| GroundPoseError::invalid(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_diagnostics(diagnostics: &[IterationDiagnostics], path: &Path) -> Result<()> {
    write(path, &diagnostics_to_jsonl(diagnostics)?)
}

pub fn load_diagnostics(path: &Path) -> Result<Vec<DiagnosticsDoc>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_json(l, &format!("{}:line {}", path.display(), i + 1)))
        .collect()
}

/// `est.json` -> `est.diagnostics.jsonl`.
pub fn diagnostics_path(estimate_path: &Path) -> PathBuf {
    estimate_path.with_extension("diagnostics.jsonl")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryObject {
    pub id: String,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub frame: String,
    pub camera: IntrinsicsDoc,
    pub plane: [f64; 4],
    pub objects: Vec<TrajectoryObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryDoc {
    pub schema_version: u32,
    pub frames: Vec<TrajectoryFrame>,
}

/// JSON files of a directory in lexicographic order.
pub fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Per-frame camera and object poses of every estimate in `dir`; failed objects are skipped.
pub fn build_trajectory(dir: &Path) -> Result<TrajectoryDoc> {
    let mut frames = Vec::new();
    for path in json_files(dir)? {
        let est = load_estimate(&path)?;
        let p = est.plane.coeffs;
        frames.push(TrajectoryFrame {
            frame: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            camera: IntrinsicsDoc::from(&est.intrinsics),
            plane: [p[0], p[1], p[2], p[3]],
            objects: est
                .ids
                .iter()
                .zip(&est.objects)
                .filter_map(|(id, o)| {
                    o.as_ref().map(|s| {
                        let d = object_doc(s);
                        TrajectoryObject {
                            id: id.clone(),
                            rotation: d.rotation,
                            translation: d.translation,
                            coeffs: d.coeffs,
                        }
                    })
                })
                .collect(),
        });
    }
    if frames.is_empty() {
        return Err(GroundPoseError::InsufficientData(format!(
            "no estimate files in {}",
            dir.display()
        )));
    }
    Ok(TrajectoryDoc {
        schema_version: SCHEMA_VERSION,
        frames,
    })
}
