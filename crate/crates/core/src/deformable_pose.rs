//! Per-object minimization of the weighted reprojection error with a Tikhonov
//! shape prior, box-bounded shape coefficients and optional ground-plane terms.
//!
//! The solver alternates two blocks: a damped Gauss-Newton step on the pose
//! `(R, T)` with backtracking, then a bounded linear least-squares update of the
//! coefficients. Each accepted step strictly lowers the loss, so the loss of
//! the returned state never exceeds the loss of the initial one.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{GroundPoseError, Result};
use crate::plane_consensus::{normal_angle, point_plane_distance};
use crate::projection::{reprojection_error, reprojection_residuals, COL_COEFFS};
use crate::rotation;
use crate::scene_model::{
    object_up_axis, CameraIntrinsics, CoeffBoundMode, Detection, ObjectState, Plane, ShapeAtlas,
    SolverConfig,
};

/// `(mu, mu1, mu2)`: shape prior, point-to-plane and axis-to-normal weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveWeights {
    pub mu_shape: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl ObjectiveWeights {
    pub fn new(mu_shape: f64, mu1: f64, mu2: f64) -> Self {
        Self { mu_shape, mu1, mu2 }
    }
}

/// Breakdown of the per-object loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub reprojection: f64,
    pub shape: f64,
    pub point_to_plane: f64,
    pub axis_to_normal: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.reprojection + self.shape + self.point_to_plane + self.axis_to_normal
    }
}

/// Everything the per-object loss depends on besides the state itself.
#[derive(Debug, Clone, Copy)]
pub struct ObjectProblem<'a> {
    pub det: &'a Detection,
    pub atlas: &'a ShapeAtlas,
    pub cam: &'a CameraIntrinsics,
    pub plane: Option<&'a Plane>,
    pub weights: ObjectiveWeights,
    pub bound_mode: CoeffBoundMode,
}

const POSE_STEPS_PER_BLOCK: usize = 5;
const MAX_DAMPING_TRIES: usize = 14;
const LAMBDA_HALVINGS: usize = 12;

impl<'a> ObjectProblem<'a> {
    pub fn new(
        det: &'a Detection,
        atlas: &'a ShapeAtlas,
        cam: &'a CameraIntrinsics,
        plane: Option<&'a Plane>,
        weights: ObjectiveWeights,
        bound_mode: CoeffBoundMode,
    ) -> Self {
        Self {
            det,
            atlas,
            cam,
            plane,
            weights,
            bound_mode,
        }
    }

    pub fn terms(&self, state: &ObjectState) -> Result<LossTerms> {
        let reprojection = reprojection_error(state, self.det, self.atlas, self.cam)?;
        let shape = self.weights.mu_shape * state.coeffs.iter().map(|c| c * c).sum::<f64>();
        let (mut point_to_plane, mut axis_to_normal) = (0.0, 0.0);
        if let Some(plane) = self.plane {
            if self.weights.mu1 > 0.0 {
                let d = point_plane_distance(&state.translation, plane)?;
                point_to_plane = self.weights.mu1 * d * d;
            }
            if self.weights.mu2 > 0.0 {
                let a = normal_angle(&object_up_axis(state), plane)?;
                axis_to_normal = self.weights.mu2 * a * a;
            }
        }
        Ok(LossTerms {
            reprojection,
            shape,
            point_to_plane,
            axis_to_normal,
        })
    }

    pub fn loss(&self, state: &ObjectState) -> Result<f64> {
        Ok(self.terms(state)?.total())
    }

    fn clamp_coeffs(&self, coeffs: &mut [f64]) {
        for (c, &u) in coeffs.iter_mut().zip(&self.atlas.coeff_bounds) {
            *c = self.bound_mode.clamp(*c, u);
        }
    }

    /// Gauss-Newton system `(J^T J, J^T r)` of the pose parameters
    /// `[rotation tangent | translation]`.
    fn pose_system(&self, state: &ObjectState) -> Result<(Matrix6<f64>, Vector6<f64>)> {
        let block = reprojection_residuals(state, self.det, self.atlas, self.cam)?;
        let jp = block.jacobian.columns(0, 6);
        let mut h: Matrix6<f64> = (jp.transpose() * jp).fixed_view::<6, 6>(0, 0).into_owned();
        let mut g: Vector6<f64> = (jp.transpose() * &block.residuals)
            .fixed_rows::<6>(0)
            .into_owned();
        if let Some(plane) = self.plane {
            let nn = plane.normal().norm();
            let n_hat = plane.normal() / nn;
            if self.weights.mu1 > 0.0 {
                let d = point_plane_distance(&state.translation, plane)?;
                let mut hb = h.fixed_view_mut::<3, 3>(3, 3);
                hb += n_hat * n_hat.transpose() * self.weights.mu1;
                let mut gb = g.fixed_rows_mut::<3>(3);
                gb += n_hat * (self.weights.mu1 * d);
            }
            if self.weights.mu2 > 0.0 {
                let (w, jw) = axis_residual(&object_up_axis(state), &n_hat);
                let mut hb = h.fixed_view_mut::<3, 3>(0, 0);
                hb += jw.transpose() * jw * self.weights.mu2;
                let mut gb = g.fixed_rows_mut::<3>(0);
                gb += jw.transpose() * w * self.weights.mu2;
            }
        }
        Ok((h, g))
    }

    /// True when the pose gradient is negligible relative to `|J| |r|`.
    pub fn is_stationary(&self, state: &ObjectState) -> Result<bool> {
        let (h, g) = self.pose_system(state)?;
        let scale = h.diagonal().amax().sqrt() * self.loss(state)?.sqrt();
        Ok(g.amax() <= 1e-6 * scale)
    }

    /// Up to `max_steps` accepted damped Gauss-Newton steps on `(R, T)`.
    pub fn pose_block(
        &self,
        state: &ObjectState,
        loss: f64,
        max_steps: usize,
    ) -> Result<(ObjectState, f64, bool)> {
        let mut current = state.clone();
        let mut current_loss = loss;
        let mut damping = 1e-4;
        let mut moved = false;
        for _ in 0..max_steps {
            let (h, g) = self.pose_system(&current)?;
            if g.amax() == 0.0 {
                break;
            }
            let mut accepted = false;
            for _ in 0..MAX_DAMPING_TRIES {
                let mut a = h;
                for k in 0..6 {
                    a[(k, k)] += damping * (h[(k, k)] + 1e-9);
                }
                let Some(chol) = a.cholesky() else {
                    damping *= 10.0;
                    continue;
                };
                let step = chol.solve(&-g);
                let candidate = apply_pose_step(&current, &step);
                match self.loss(&candidate) {
                    Ok(l) if l < current_loss => {
                        current = candidate;
                        current_loss = l;
                        damping = (damping * 0.1).max(1e-12);
                        accepted = true;
                        break;
                    }
                    _ => damping *= 10.0,
                }
            }
            if !accepted {
                break;
            }
            moved = true;
        }
        Ok((current, current_loss, moved))
    }

    /// Bounded coefficient update at fixed pose; returns the (possibly unchanged) state.
    pub fn lambda_block(&self, state: &ObjectState, loss: f64) -> Result<(ObjectState, f64)> {
        let m = self.atlas.num_components();
        if m == 0 {
            return Ok((state.clone(), loss));
        }
        let block = reprojection_residuals(state, self.det, self.atlas, self.cam)?;
        let jl = block.jacobian.columns(COL_COEFFS, m).into_owned();
        let lambda = DVector::from_column_slice(&state.coeffs);
        let mut normal: DMatrix<f64> = jl.transpose() * &jl;
        for k in 0..m {
            normal[(k, k)] += self.weights.mu_shape + 1e-12;
        }
        let rhs = jl.transpose() * (&jl * &lambda - &block.residuals);
        let Some(target) = normal.clone().cholesky().map(|c| c.solve(&rhs)).or_else(|| normal.lu().solve(&rhs)) else {
            return Ok((state.clone(), loss));
        };
        let mut target: Vec<f64> = target.iter().copied().collect();
        self.clamp_coeffs(&mut target);
        let mut t = 1.0;
        for _ in 0..LAMBDA_HALVINGS {
            let coeffs: Vec<f64> = state
                .coeffs
                .iter()
                .zip(&target)
                .map(|(a, b)| a + t * (b - a))
                .collect();
            let candidate = ObjectState::new(state.rotation, state.translation, coeffs);
            if let Ok(l) = self.loss(&candidate) {
                if l < loss {
                    return Ok((candidate, l));
                }
            }
            t *= 0.5;
        }
        Ok((state.clone(), loss))
    }
}

impl ObjectProblem<'_> {
    /// Gauss-Newton system over `[rotation tangent | translation | coefficients]`.
    fn coupled_system(&self, state: &ObjectState) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let m = self.atlas.num_components();
        let n = 6 + m;
        let block = reprojection_residuals(state, self.det, self.atlas, self.cam)?;
        let j = block.jacobian.columns(0, n);
        let mut h: DMatrix<f64> = j.transpose() * j;
        let mut g: DVector<f64> = j.transpose() * &block.residuals;
        for k in 0..m {
            h[(6 + k, 6 + k)] += self.weights.mu_shape;
            g[6 + k] += self.weights.mu_shape * state.coeffs[k];
        }
        if let Some(plane) = self.plane {
            let n_hat = plane.normal().normalize();
            if self.weights.mu1 > 0.0 {
                let d = point_plane_distance(&state.translation, plane)?;
                let mut hb = h.view_mut((3, 3), (3, 3));
                hb += n_hat * n_hat.transpose() * self.weights.mu1;
                let mut gb = g.rows_mut(3, 3);
                gb += n_hat * (self.weights.mu1 * d);
            }
            if self.weights.mu2 > 0.0 {
                let (w, jw) = axis_residual(&object_up_axis(state), &n_hat);
                let mut hb = h.view_mut((0, 0), (3, 3));
                hb += jw.transpose() * jw * self.weights.mu2;
                let mut gb = g.rows_mut(0, 3);
                gb += jw.transpose() * w * self.weights.mu2;
            }
        }
        Ok((h, g))
    }

    /// Up to `max_steps` accepted damped steps on pose and coefficients
    /// together; coefficients are projected onto the box.
    pub fn coupled_block(&self, state: &ObjectState, loss: f64, max_steps: usize) -> Result<(ObjectState, f64)> {
        let mut current = state.clone();
        let mut current_loss = loss;
        let mut damping = 1e-4;
        for _ in 0..max_steps {
            let (h, g) = self.coupled_system(&current)?;
            if g.amax() == 0.0 {
                break;
            }
            let mut accepted = false;
            for _ in 0..MAX_DAMPING_TRIES {
                let mut a = h.clone();
                for k in 0..a.nrows() {
                    a[(k, k)] += damping * (h[(k, k)] + 1e-9);
                }
                let Some(chol) = a.cholesky() else {
                    damping *= 10.0;
                    continue;
                };
                let step = chol.solve(&-&g);
                let mut candidate = apply_pose_step(&current, &Vector6::from_iterator(step.rows(0, 6).iter().copied()));
                for (k, c) in candidate.coeffs.iter_mut().enumerate() {
                    *c += step[6 + k];
                }
                self.clamp_coeffs(&mut candidate.coeffs);
                match self.loss(&candidate) {
                    Ok(l) if l < current_loss => {
                        current = candidate;
                        current_loss = l;
                        damping = (damping * 0.1).max(1e-12);
                        accepted = true;
                        break;
                    }
                    _ => damping *= 10.0,
                }
            }
            if !accepted {
                break;
            }
        }
        Ok((current, current_loss))
    }
}

fn apply_pose_step(state: &ObjectState, step: &Vector6<f64>) -> ObjectState {
    let delta = Vector3::new(step[0], step[1], step[2]);
    ObjectState::new(
        rotation::retract_left(&state.rotation, &delta),
        state.translation + Vector3::new(step[3], step[4], step[5]),
        state.coeffs.clone(),
    )
}

/// Residual vector whose norm is the axis-to-normal angle, and its Jacobian
/// with respect to a left rotation increment.
fn axis_residual(up: &Vector3<f64>, n_hat: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let c = n_hat.cross(up);
    let s = c.norm().min(1.0);
    let (g, dg_over_s) = if s < 1e-3 {
        let s2 = s * s;
        (1.0 + s2 / 6.0 + 0.075 * s2 * s2, 1.0 / 3.0 + 0.3 * s2)
    } else {
        let asin = s.asin();
        (asin / s, (s / (1.0 - s * s).sqrt() - asin) / (s * s * s))
    };
    let dc = -(rotation::hat(n_hat) * rotation::hat(up));
    let jw = (Matrix3::identity() * g + c * c.transpose() * dg_over_s) * dc;
    (c * g, jw)
}

/// Outcome of a per-object solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSolution {
    pub state: ObjectState,
    pub loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
}

/// Minimizes the per-object loss by alternating pose and shape blocks.
pub fn solve_object(
    init: &ObjectState,
    det: &Detection,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
    plane: Option<&Plane>,
    weights: ObjectiveWeights,
    config: &SolverConfig,
) -> Result<ObjectSolution> {
    if weights.mu_shape < 0.0 || weights.mu1 < 0.0 || weights.mu2 < 0.0 {
        return Err(GroundPoseError::invalid("objective weights must be non-negative"));
    }
    let problem = ObjectProblem::new(det, atlas, cam, plane, weights, config.coeff_bound_mode);
    let mut state = init.clone();
    problem.clamp_coeffs(&mut state.coeffs);
    let initial_loss = problem.loss(&state)?;
    let mut loss = initial_loss;
    let mut iterations = 0;
    for _ in 0..config.inner_max_iters {
        iterations += 1;
        let before = loss;
        let (s, l, _) = problem.pose_block(&state, loss, POSE_STEPS_PER_BLOCK)?;
        let (s, l) = problem.lambda_block(&s, l)?;
        let (s, l) = if config.coupled_step {
            problem.coupled_block(&s, l, POSE_STEPS_PER_BLOCK)?
        } else {
            (s, l)
        };
        state = s;
        loss = l;
        if before - loss <= config.inner_tol * before || loss <= f64::MIN_POSITIVE {
            break;
        }
    }
    Ok(ObjectSolution {
        state,
        loss,
        initial_loss,
        iterations,
    })
}

/// Shape-coefficient update with the pose held fixed.
///
/// Solves the linearized regularized least-squares problem, projects onto the
/// coefficient box and backtracks towards the current coefficients until the
/// loss decreases; returns the current coefficients if no step helps.
pub fn lambda_step(
    state: &ObjectState,
    det: &Detection,
    atlas: &ShapeAtlas,
    cam: &CameraIntrinsics,
    mu: f64,
    mode: CoeffBoundMode,
) -> Result<Vec<f64>> {
    let problem = ObjectProblem::new(det, atlas, cam, None, ObjectiveWeights::new(mu, 0.0, 0.0), mode);
    let loss = problem.loss(state)?;
    Ok(problem.lambda_block(state, loss)?.0.coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project_point;
    use crate::synth_oracle::car_atlas;
    use nalgebra::Vector2;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, Vector2::new(640.0, 360.0)).unwrap()
    }

    fn observe(state: &ObjectState, atlas: &ShapeAtlas, cam: &CameraIntrinsics) -> Detection {
        Detection {
            id: "obj".into(),
            keypoints: state
                .camera_points(atlas)
                .unwrap()
                .iter()
                .map(|p| project_point(p, cam).unwrap())
                .collect(),
            scores: vec![1.0; atlas.num_keypoints()],
        }
    }

    fn truth(coeffs: Vec<f64>) -> ObjectState {
        ObjectState::new(
            rotation::exp(&Vector3::new(-1.3, 0.2, 0.4)),
            Vector3::new(-1.0, 1.8, 18.0),
            coeffs,
        )
    }

    #[test]
    fn ground_truth_is_stationary() {
        let atlas = car_atlas();
        let gt = truth(vec![0.4, -0.6]);
        let det = observe(&gt, &atlas, &cam());
        let sol = solve_object(
            &gt,
            &det,
            &atlas,
            &cam(),
            None,
            ObjectiveWeights::new(0.0, 0.0, 0.0),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(sol.loss < 1e-16);
        assert!((sol.state.rotation - gt.rotation).amax() < 1e-8);
        assert!((sol.state.translation - gt.translation).amax() < 1e-8);
        for (a, b) in sol.state.coeffs.iter().zip(&gt.coeffs) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn recovers_shape_coefficients() {
        let atlas = car_atlas();
        let gt = truth(vec![1.2, -0.8]);
        let det = observe(&gt, &atlas, &cam());
        let mut init = gt.clone();
        init.coeffs = vec![0.0, 0.0];
        init.translation *= 1.05;
        init.rotation = rotation::exp(&Vector3::new(0.03, -0.02, 0.05)) * gt.rotation;
        let sol = solve_object(
            &init,
            &det,
            &atlas,
            &cam(),
            None,
            ObjectiveWeights::new(1e-3, 0.0, 0.0),
            &SolverConfig::default(),
        )
        .unwrap();
        for (a, b) in sol.state.coeffs.iter().zip(&gt.coeffs) {
            assert!((a - b).abs() <= 0.02 * b.abs(), "coeff {a} vs {b}");
        }
        assert!(sol.loss <= sol.initial_loss);
    }

    #[test]
    fn plane_term_pulls_object_down() {
        let atlas = car_atlas();
        let plane = Plane::new(0.0, -0.95, -0.3122498999, 2.5);
        let mut gt = truth(vec![0.0, 0.0]);
        let d0 = point_plane_distance(&gt.translation, &plane).unwrap();
        gt.translation -= plane.normal().normalize() * (d0 - 0.5);
        let det = observe(&gt, &atlas, &cam());
        let before = point_plane_distance(&gt.translation, &plane).unwrap();
        assert!((before - 0.5).abs() < 1e-9);
        let sol = solve_object(
            &gt,
            &det,
            &atlas,
            &cam(),
            Some(&plane),
            ObjectiveWeights::new(1.0, 1e4, 0.0),
            &SolverConfig::default(),
        )
        .unwrap();
        let after = point_plane_distance(&sol.state.translation, &plane).unwrap();
        assert!(after.abs() < before.abs(), "{after} vs {before}");
        assert!(sol.loss <= sol.initial_loss);
    }

    #[test]
    fn axis_residual_matches_angle_and_differences() {
        let n_hat = Vector3::new(0.1, -0.9, -0.4).normalize();
        for r in [
            rotation::exp(&Vector3::new(0.3, 0.1, -0.2)),
            rotation::exp(&Vector3::new(1.3, -0.2, 0.7)),
        ] {
            let up = r * Vector3::z();
            let (w, jw) = axis_residual(&up, &n_hat);
            let angle = normal_angle(&up, &Plane::from_normal_offset(n_hat, 1.0)).unwrap();
            assert!((w.norm() - angle).abs() < 1e-12);
            let eps = 1e-6;
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = eps;
                let (wp, _) = axis_residual(&(rotation::exp(&d) * up), &n_hat);
                let (wm, _) = axis_residual(&(rotation::exp(&-d) * up), &n_hat);
                let fd = (wp - wm) / (2.0 * eps);
                assert!((fd - jw.column(k)).norm() < 1e-7 * (1.0 + fd.norm()));
            }
        }
    }

    #[test]
    fn lambda_step_zero_shape_stays_zero() {
        let atlas = car_atlas();
        let gt = truth(vec![0.0, 0.0]);
        let det = observe(&gt, &atlas, &cam());
        for mu in [1e-3, 1.0, 10.0] {
            let c = lambda_step(&gt, &det, &atlas, &cam(), mu, CoeffBoundMode::Symmetric).unwrap();
            assert!(c.iter().all(|v| v.abs() < 1e-12), "{c:?}");
        }
    }

    #[test]
    fn lambda_step_large_mu_shrinks_to_zero() {
        let atlas = car_atlas();
        let gt = truth(vec![1.5, 1.0]);
        let det = observe(&gt, &atlas, &cam());
        let mut start = gt.clone();
        start.coeffs = vec![0.0, 0.0];
        let c = lambda_step(&start, &det, &atlas, &cam(), 1e12, CoeffBoundMode::Symmetric).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-6), "{c:?}");
    }

    #[test]
    fn lambda_step_clamps_to_upper_bound() {
        let atlas = car_atlas();
        let bound = atlas.coeff_bounds[0];
        let gt = truth(vec![1.5 * bound, 0.0]);
        let det = observe(&gt, &atlas, &cam());
        let mut start = gt.clone();
        start.coeffs = vec![0.0, 0.0];
        let c = lambda_step(&start, &det, &atlas, &cam(), 1e-6, CoeffBoundMode::NonNegative).unwrap();
        assert_eq!(c[0], bound);
        assert!(c[1] >= 0.0);
    }

    #[test]
    fn non_negative_box_rejects_negative() {
        let atlas = car_atlas();
        let gt = truth(vec![-1.0, -1.0]);
        let det = observe(&gt, &atlas, &cam());
        let mut start = gt.clone();
        start.coeffs = vec![0.5, 0.5];
        let c = lambda_step(&start, &det, &atlas, &cam(), 1e-6, CoeffBoundMode::NonNegative).unwrap();
        assert!(c.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn noisy_solve_is_monotone_and_bounded() {
        let atlas = car_atlas();
        let gt = truth(vec![2.0, -2.5]);
        let mut det = observe(&gt, &atlas, &cam());
        for (i, k) in det.keypoints.iter_mut().enumerate() {
            k.x += 3.0 * (i as f64 * 2.1).sin();
            k.y += 3.0 * (i as f64 * 1.3).cos();
        }
        let plane = Plane::new(0.0, -1.0, -0.2, 2.0);
        let sol = solve_object(
            &gt,
            &det,
            &atlas,
            &cam(),
            Some(&plane),
            ObjectiveWeights::new(1.0, 50.0, 500.0),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(sol.loss <= sol.initial_loss);
        for (c, u) in sol.state.coeffs.iter().zip(&atlas.coeff_bounds) {
            assert!(c.abs() <= *u);
        }
        assert!(rotation::is_rotation(&sol.state.rotation, 1e-9));
    }
}
