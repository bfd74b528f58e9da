//! Scene-level alternation: per-object solves, plane consensus on
//! translations and up-axes, focal refinement and growing plane weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::deformable_pose::{solve_object, ObjectProblem, ObjectiveWeights};
use crate::error::{GroundPoseError, Result};
use crate::plane_consensus::{
    normalize_plane, point_plane_distance, ransac_plane_from_rotations,
    ransac_plane_from_translations, PlaneFit,
};
use crate::pnp_init::dlt_pose_with_threshold;
use crate::scene_model::{
    validate_atlas, CameraIntrinsics, EstimateFlags, FocalMode, ObjectFailure, ObjectState, Plane,
    Scene, SceneEstimate, ShapeAtlas, SolverConfig, WeightSchedule,
};
use crate::self_calibration::{depth_rescale, focal_update, rescale_plane_depth, FocalUpdateConfig};

/// State of one outer iteration. Record 0 is the plane-free initial solve.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Total loss after this iteration's re-solve.
    pub total_loss: f64,
    pub focal: f64,
    /// Plane used by the plane terms of this iteration.
    pub plane: Plane,
    pub mu1: f64,
    pub mu2: f64,
    /// Inliers of the translation and the up-axis consensus.
    pub inlier_counts: [usize; 2],
    /// Largest distance of a consensus inlier to `plane`.
    pub max_plane_residual: f64,
    /// Total loss at this iteration's weights, plane and focal, before and
    /// after the per-object re-solve, over the objects that survived it.
    pub resolve_loss_before: f64,
    pub resolve_loss_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSolution {
    pub estimate: SceneEstimate,
    pub diagnostics: Vec<IterationDiagnostics>,
}

fn scheduled(s: &WeightSchedule, iteration: usize) -> f64 {
    if iteration == 0 {
        return 0.0;
    }
    let exponent = i32::try_from(iteration - 1).unwrap_or(i32::MAX);
    (s.initial * s.growth.powi(exponent)).min(s.cap)
}

/// `(mu1, mu2)` for an outer iteration: zero at 0, then geometric growth up to the caps.
pub fn weight_schedule(iteration: usize, config: &SolverConfig) -> (f64, f64) {
    (
        scheduled(&config.mu1_schedule, iteration),
        scheduled(&config.mu2_schedule, iteration),
    )
}

#[allow(clippy::too_many_arguments)]
fn object_loss(
    state: &ObjectState,
    scene: &Scene,
    k: usize,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
    plane: Option<&Plane>,
    weights: ObjectiveWeights,
    config: &SolverConfig,
) -> Result<f64> {
    ObjectProblem::new(&scene.detections[k], atlas, cam, plane, weights, config.coeff_bound_mode).loss(state)
}

/// Sum of per-object losses; plane terms only for objects marked as plane inliers.
pub fn total_loss(
    estimate: &SceneEstimate,
    scene: &Scene,
    atlas: &ShapeAtlas,
    weights: ObjectiveWeights,
) -> Result<f64> {
    if estimate.objects.len() != scene.detections.len() || estimate.plane_inliers.len() != scene.detections.len() {
        return Err(GroundPoseError::invalid("estimate does not match the scene"));
    }
    let mut total = 0.0;
    for (k, state) in estimate.objects.iter().enumerate() {
        let Some(state) = state else { continue };
        let plane = estimate.plane_inliers[k].then_some(&estimate.plane);
        let problem = ObjectProblem::new(
            &scene.detections[k],
            atlas,
            &estimate.intrinsics,
            plane,
            weights,
            Default::default(),
        );
        total += problem.loss(state)?;
    }
    Ok(total)
}

fn random_plane(rng: &mut ChaCha8Rng) -> Result<Plane> {
    loop {
        let n = nalgebra::Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if n.norm() > 0.1 {
            return normalize_plane(&Plane::from_normal_offset(n, rng.random_range(0.5..5.0)));
        }
    }
}

/// Angle between the translation-plane and up-axis-plane normals of `states`;
/// infinite when either consensus fails.
fn plane_disagreement(states: &[ObjectState], atlas: &ShapeAtlas, config: &SolverConfig) -> (f64, Option<(Plane, Plane)>) {
    match consensus(states, atlas, config) {
        Ok((_, Some(t), r)) => {
            let cos = t.plane.normal().normalize().dot(&r.plane.normal().normalize()).abs();
            (cos.min(1.0).acos(), Some((t.plane, r.plane)))
        }
        _ => (f64::INFINITY, None),
    }
}

/// Rescales plane-free states by `ratio` and re-solves them at the rescaled
/// focal. A failed re-solve keeps the rescaled state.
fn rescaled_free_states(
    states: &[ObjectState],
    active: &[usize],
    scene: &Scene,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
    ratio: f64,
    config: &SolverConfig,
) -> Result<Vec<ObjectState>> {
    let cam = cam.with_focal(cam.focal * ratio);
    let weights = ObjectiveWeights::new(config.mu_shape, 0.0, 0.0);
    states
        .par_iter()
        .zip(active)
        .map(|(s, &i)| {
            let s = depth_rescale(s, ratio)?;
            Ok(solve_object(&s, &scene.detections[i], atlas, &cam, None, weights, config)
                .map(|sol| sol.state)
                .unwrap_or(s))
        })
        .collect()
}

struct FocalStep {
    ratio: f64,
    /// Plane-free states at the new focal, aligned with the active objects.
    states: Vec<ObjectState>,
    /// No candidate beat the current focal.
    shrink: bool,
    clamped: bool,
    unobservable: bool,
}

/// One focal move on plane-free evidence. A plane-ratio update larger than
/// `step` in log-focal is taken as is. Otherwise the candidates are that update
/// and `exp(+-step)` multiples of the focal, and the one whose planes agree
/// best wins, the current focal included; the step halves unless a fixed-step
/// candidate wins. The ratio alone stalls near the
/// truth when the two normals differ mostly sideways, which full perspective
/// produces.
#[allow(clippy::too_many_arguments)]
fn focal_step(
    current: &[ObjectState],
    active: &[usize],
    scene: &Scene,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
    focal_cfg: &FocalUpdateConfig,
    step: f64,
    config: &SolverConfig,
) -> Result<FocalStep> {
    let (angle, planes) = plane_disagreement(current, atlas, config);
    let mut out = FocalStep { ratio: 1.0, states: current.to_vec(), shrink: false, clamped: false, unobservable: false };
    let Some((plane_t, plane_r)) = planes else {
        return Ok(out);
    };
    let mut candidates = Vec::new();
    match focal_update(&plane_t, &plane_r, cam.focal, focal_cfg) {
        Ok(up) => {
            out.clamped = up.clamped;
            if up.ratio.ln().abs() > step {
                out.ratio = up.ratio;
                out.states = rescaled_free_states(current, active, scene, atlas, cam, up.ratio, config)?;
                return Ok(out);
            }
            candidates.push((up.ratio, false));
        }
        Err(GroundPoseError::UnobservableFocal { .. }) => {
            out.unobservable = true;
            return Ok(out);
        }
        Err(GroundPoseError::Degenerate(_)) => {}
        Err(e) => return Err(e),
    }
    if step >= 0.5 * config.focal_tol {
        for r in [step.exp(), (-step).exp()] {
            let f = (cam.focal * r).clamp(focal_cfg.min_focal, focal_cfg.max_focal);
            candidates.push((f / cam.focal, true));
        }
    }
    let mut best = angle;
    out.shrink = true;
    for (r, fixed_step) in candidates.into_iter().filter(|&(r, _)| r != 1.0) {
        let states = rescaled_free_states(current, active, scene, atlas, cam, r, config)?;
        let (a, _) = plane_disagreement(&states, atlas, config);
        if a < best {
            best = a;
            out.ratio = r;
            out.states = states;
            out.shrink = !fixed_step;
        }
    }
    Ok(out)
}

struct Consensus {
    plane: Plane,
    /// Indexed like the active objects.
    mask: Vec<bool>,
    counts: [usize; 2],
    translation_plane: bool,
}

/// Up-axis consensus always; translation consensus when three or more objects
/// are active. The constraint plane is the translation plane when available.
fn consensus(states: &[ObjectState], atlas: &ShapeAtlas, config: &SolverConfig) -> Result<(Consensus, Option<PlaneFit>, PlaneFit)> {
    let rcfg = config.ransac.resolve(atlas.diameter);
    let fit_r = ransac_plane_from_rotations(states, &rcfg)?;
    let fit_t = if states.len() >= 3 {
        let translations: Vec<_> = states.iter().map(|s| s.translation).collect();
        ransac_plane_from_translations(&translations, &rcfg).ok()
    } else {
        None
    };
    let c = match &fit_t {
        Some(t) => Consensus {
            plane: t.plane,
            mask: t.inliers.iter().zip(&fit_r.inliers).map(|(a, b)| *a && *b).collect(),
            counts: [t.inlier_count(), fit_r.inlier_count()],
            translation_plane: true,
        },
        None => Consensus {
            plane: fit_r.plane,
            mask: fit_r.inliers.clone(),
            counts: [0, fit_r.inlier_count()],
            translation_plane: false,
        },
    };
    Ok((c, fit_t, fit_r))
}

fn max_residual(states: &[ObjectState], mask: &[bool], plane: &Plane) -> f64 {
    states
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .filter_map(|(s, _)| point_plane_distance(&s.translation, plane).ok())
        .fold(0.0, |acc, d| acc.max(d.abs()))
}

/// Runs the full estimation on one scene.
///
/// Objects with fewer than six usable keypoints, or whose solve fails, are
/// reported in `failures` and left out of the consensus.
pub fn solve_scene(scene: &Scene, atlas: &ShapeAtlas, config: &SolverConfig) -> Result<SceneSolution> {
    validate_atlas(atlas).into_result()?;
    if scene.detections.is_empty() {
        return Err(GroundPoseError::EmptyScene);
    }
    scene.validate(config.keypoint_margin)?;
    for det in &scene.detections {
        if det.keypoints.len() != atlas.num_keypoints() {
            return Err(GroundPoseError::Validation(format!(
                "detection {} has {} keypoints, atlas has {}",
                det.id,
                det.keypoints.len(),
                atlas.num_keypoints()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let diagonal = scene.image_diagonal();
    let focal0 = match &scene.intrinsics_hint {
        Some(hint) => hint.focal,
        None => {
            let (lo, hi) = config.focal_init_range;
            rng.random_range(lo * diagonal..=hi * diagonal)
        }
    };
    let mut cam = CameraIntrinsics::new(focal0, scene.principal_point())?;
    let initial_plane = random_plane(&mut rng)?;
    let focal_cfg = FocalUpdateConfig::for_image(config.focal_rule, config.focal_eps, config.focal_clamp, diagonal);

    let n = scene.detections.len();
    let mut flags = EstimateFlags::default();
    let mut failures: Vec<ObjectFailure> = Vec::new();
    let base = ObjectiveWeights::new(config.mu_shape, 0.0, 0.0);

    // plane-free initialization
    let init: Vec<Result<(ObjectState, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let det = &scene.detections[k];
            let s0 = dlt_pose_with_threshold(det, atlas, &cam, config.dlt_min_score)?;
            let sol = solve_object(&s0, det, atlas, &cam, None, base, config)?;
            Ok((sol.state, sol.initial_loss, sol.loss))
        })
        .collect();
    let mut states: Vec<Option<ObjectState>> = Vec::with_capacity(n);
    let (mut before0, mut after0) = (0.0, 0.0);
    for (k, r) in init.into_iter().enumerate() {
        match r {
            Ok((s, b, a)) => {
                before0 += b;
                after0 += a;
                states.push(Some(s));
            }
            Err(e) => {
                failures.push(ObjectFailure {
                    index: k,
                    id: scene.detections[k].id.clone(),
                    message: e.to_string(),
                });
                states.push(None);
            }
        }
    }
    if states.iter().all(Option::is_none) {
        return Err(GroundPoseError::EmptyScene);
    }
    let mut diagnostics = vec![IterationDiagnostics {
        iteration: 0,
        total_loss: after0,
        focal: cam.focal,
        plane: initial_plane,
        mu1: 0.0,
        mu2: 0.0,
        inlier_counts: [0, 0],
        max_plane_residual: 0.0,
        resolve_loss_before: before0,
        resolve_loss_after: after0,
    }];

    // the constrained states drift from these once plane terms are active
    let mut free_states = states.clone();
    let mut search_step = config.focal_search_step;
    let mut plane = initial_plane;
    let mut inliers = vec![false; n];
    let mut weights = base;
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_total = after0;

    if config.use_plane {
        for k in 1..=config.max_iters {
            let active: Vec<usize> = (0..n).filter(|&i| states[i].is_some()).collect();
            if active.is_empty() {
                return Err(GroundPoseError::EmptyScene);
            }
            let mut active_states: Vec<ObjectState> =
                active.iter().map(|&i| states[i].clone().expect("active")).collect();
            let focal_before = cam.focal;
            let estimate_focal = config.focal_mode == FocalMode::Estimate;
            let c = if estimate_focal && config.focal_from_plane_free {
                // the constrained states stay tied to planes fitted at stale
                // focals, so the consensus follows the plane-free copy here
                let current: Vec<ObjectState> =
                    active.iter().map(|&i| free_states[i].clone().expect("active")).collect();
                let step = focal_step(&current, &active, scene, atlas, &cam, &focal_cfg, search_step, config)?;
                flags.focal_clamped |= step.clamped;
                flags.focal_unobservable |= step.unobservable;
                if step.shrink {
                    search_step *= 0.5;
                }
                if step.ratio != 1.0 {
                    for s in active_states.iter_mut() {
                        *s = depth_rescale(s, step.ratio)?;
                    }
                    cam = cam.with_focal(cam.focal * step.ratio);
                }
                let (c, _, _) = consensus(&step.states, atlas, config)?;
                for (&i, s) in active.iter().zip(step.states) {
                    free_states[i] = Some(s);
                }
                c
            } else {
                let (mut c, fit_t, fit_r) = consensus(&active_states, atlas, config)?;
                if let (true, Some(fit_t)) = (estimate_focal, &fit_t) {
                    let ratio = match focal_update(&fit_t.plane, &fit_r.plane, cam.focal, &focal_cfg) {
                        Ok(up) => {
                            flags.focal_clamped |= up.clamped;
                            up.ratio
                        }
                        Err(GroundPoseError::UnobservableFocal { .. }) => {
                            flags.focal_unobservable = true;
                            1.0
                        }
                        Err(GroundPoseError::Degenerate(_)) => 1.0,
                        Err(e) => return Err(e),
                    };
                    if ratio != 1.0 {
                        for s in active_states.iter_mut() {
                            *s = depth_rescale(s, ratio)?;
                        }
                        c.plane = normalize_plane(&rescale_plane_depth(&c.plane, ratio))?;
                        cam = cam.with_focal(cam.focal * ratio);
                    }
                }
                c
            };
            if !c.translation_plane {
                flags.plane_from_rotations_only = true;
            }

            let (mu1, mu2) = weight_schedule(k, config);
            weights = ObjectiveWeights::new(config.mu_shape, mu1, mu2);
            let results: Vec<Result<(ObjectState, f64, f64)>> = active_states
                .par_iter()
                .enumerate()
                .map(|(a, s)| {
                    let i = active[a];
                    let det = &scene.detections[i];
                    let pl = c.mask[a].then_some(&c.plane);
                    let sol = solve_object(s, det, atlas, &cam, pl, weights, config)?;
                    // shape finetune at the updated pose
                    let problem = ObjectProblem::new(det, atlas, &cam, pl, weights, config.coeff_bound_mode);
                    let (state, loss) = problem.lambda_block(&sol.state, sol.loss)?;
                    Ok((state, sol.initial_loss, loss))
                })
                .collect();
            let (mut before, mut after) = (0.0, 0.0);
            for (a, r) in results.into_iter().enumerate() {
                let i = active[a];
                match r {
                    Ok((s, b, l)) => {
                        before += b;
                        after += l;
                        states[i] = Some(s);
                    }
                    Err(e) => {
                        failures.push(ObjectFailure {
                            index: i,
                            id: scene.detections[i].id.clone(),
                            message: e.to_string(),
                        });
                        states[i] = None;
                    }
                }
            }
            plane = c.plane;
            inliers = vec![false; n];
            for (a, &i) in active.iter().enumerate() {
                inliers[i] = c.mask[a] && states[i].is_some();
            }
            let solved: Vec<ObjectState> = active.iter().filter_map(|&i| states[i].clone()).collect();
            let solved_mask: Vec<bool> = active.iter().filter(|&&i| states[i].is_some()).map(|&i| inliers[i]).collect();
            diagnostics.push(IterationDiagnostics {
                iteration: k,
                total_loss: after,
                focal: cam.focal,
                plane,
                mu1,
                mu2,
                inlier_counts: c.counts,
                max_plane_residual: max_residual(&solved, &solved_mask, &plane),
                resolve_loss_before: before,
                resolve_loss_after: after,
            });
            iterations = k;

            let loss_settled = (after - prev_total).abs() <= config.convergence_tol * prev_total.abs() + 1e-12;
            let search_done = !config.focal_from_plane_free
                || config.focal_mode == FocalMode::Fixed
                || search_step < 0.5 * config.focal_tol;
            let focal_settled = (cam.focal - focal_before).abs() < config.focal_tol * focal_before && search_done;
            prev_total = after;
            if loss_settled && focal_settled {
                converged = true;
                break;
            }
        }
    }

    let active: Vec<usize> = (0..n).filter(|&i| states[i].is_some()).collect();
    if active.is_empty() {
        return Err(GroundPoseError::EmptyScene);
    }
    if !config.use_plane || config.max_iters == 0 {
        let active_states: Vec<ObjectState> = active.iter().map(|&i| states[i].clone().expect("active")).collect();
        let (c, _, _) = consensus(&active_states, atlas, config)?;
        if !c.translation_plane {
            flags.plane_from_rotations_only = true;
        }
        plane = c.plane;
        for (a, &i) in active.iter().enumerate() {
            inliers[i] = c.mask[a];
        }
        converged = true;
    }
    flags.focal_fixed = config.focal_mode == FocalMode::Fixed || !config.use_plane || active.len() < 3;

    let per_object_loss = (0..n)
        .map(|i| {
            states[i].as_ref().and_then(|s| {
                object_loss(s, scene, i, atlas, &cam, inliers[i].then_some(&plane), weights, config).ok()
            })
        })
        .collect();
    let estimate = SceneEstimate {
        ids: scene.detections.iter().map(|d| d.id.clone()).collect(),
        objects: states,
        plane,
        intrinsics: cam,
        per_object_loss,
        plane_inliers: inliers,
        converged,
        iterations,
        flags,
        failures,
    };
    Ok(SceneSolution { estimate, diagnostics })
}
