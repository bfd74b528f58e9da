//! Ground-plane consensus from object positions and from object up-axes,
//! and the two object-to-plane distance measures.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GroundPoseError, Result};
use crate::scene_model::{object_up_axis, ObjectState, Plane};

/// Signed distance of `t` to `plane`, invariant to positive rescaling of the coefficients.
pub fn point_plane_distance(t: &Vector3<f64>, plane: &Plane) -> Result<f64> {
    let n = plane.normal();
    let norm = n.norm();
    if !(norm > 0.0) {
        return Err(GroundPoseError::InvalidPlane);
    }
    Ok((n.dot(t) + plane.offset()) / norm)
}

/// `asin(|n_hat x u_hat|)` in `[0, pi/2]`: parallel and antiparallel both read as 0.
pub fn normal_angle(up: &Vector3<f64>, plane: &Plane) -> Result<f64> {
    let n = plane.normal();
    if !(n.norm() > 0.0) {
        return Err(GroundPoseError::InvalidPlane);
    }
    if !(up.norm() > 0.0) {
        return Err(GroundPoseError::invalid("up axis must be nonzero"));
    }
    let s = n.normalize().cross(&up.normalize()).norm();
    Ok(s.min(1.0).asin())
}

/// Unit normal, `v_d >= 0`; when `v_d` is zero, `v_c >= 0`.
pub fn normalize_plane(plane: &Plane) -> Result<Plane> {
    let norm = plane.normal().norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(GroundPoseError::InvalidPlane);
    }
    let mut coeffs = plane.coeffs / norm;
    let flip = if coeffs[3].abs() > 1e-12 {
        coeffs[3] < 0.0
    } else {
        coeffs[2] < 0.0
    };
    if flip {
        coeffs = -coeffs;
    }
    Ok(Plane { coeffs })
}

/// Thresholds resolved to absolute units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Object units.
    pub distance_threshold: f64,
    /// Radians.
    pub angle_threshold: f64,
    pub seed: u64,
}

impl crate::scene_model::RansacSettings {
    /// Resolves the diameter-relative distance threshold.
    pub fn resolve(&self, diameter: f64) -> RansacConfig {
        RansacConfig {
            iterations: self.iterations,
            distance_threshold: self.distance_threshold_diameters * diameter,
            angle_threshold: self.angle_threshold,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    /// Normalized.
    pub plane: Plane,
    pub inliers: Vec<bool>,
}

impl PlaneFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Total-least-squares plane (smallest principal direction) through `points`.
pub fn fit_plane_tls(points: &[Vector3<f64>]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(GroundPoseError::InsufficientData(format!(
            "plane fit needs 3 points, got {}",
            points.len()
        )));
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_mid, l_max) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(l_max > 0.0) || l_mid <= 1e-12 * l_max {
        return Err(GroundPoseError::Degenerate(
            "points are collinear or coincident".into(),
        ));
    }
    let normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    normalize_plane(&Plane::from_normal_offset(normal, -normal.dot(&centroid)))
}

fn plane_through(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<Plane> {
    let u = b - a;
    let v = c - a;
    let n = u.cross(&v);
    if n.norm() <= 1e-12 * u.norm() * v.norm() || n.norm() == 0.0 {
        return None;
    }
    let n = n.normalize();
    Some(Plane::from_normal_offset(n, -n.dot(a)))
}

fn n_choose_3(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

/// Minimal-sample hypotheses: every triple when that is within budget, else seeded random triples.
fn triples(n: usize, config: &RansacConfig) -> Vec<[usize; 3]> {
    if n_choose_3(n) <= config.iterations.max(1) {
        let mut out = Vec::with_capacity(n_choose_3(n));
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    out.push([i, j, k]);
                }
            }
        }
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        (0..config.iterations)
            .map(|_| {
                let s = sample(&mut rng, n, 3);
                [s.index(0), s.index(1), s.index(2)]
            })
            .collect()
    }
}

fn score<T>(items: &[T], residual: impl Fn(&T) -> f64, threshold: f64) -> (usize, f64, Vec<bool>) {
    let mut count = 0;
    let mut cost = 0.0;
    let mask: Vec<bool> = items
        .iter()
        .map(|it| {
            let r = residual(it);
            let inlier = r.abs() <= threshold;
            if inlier {
                count += 1;
                cost += r * r;
            }
            inlier
        })
        .collect();
    (count, cost, mask)
}

fn better(candidate: (usize, f64), best: Option<(usize, f64)>) -> bool {
    match best {
        None => true,
        Some((count, cost)) => candidate.0 > count || (candidate.0 == count && candidate.1 < cost),
    }
}

/// Consensus plane through object positions, refit on the inliers.
pub fn ransac_plane_from_translations(
    translations: &[Vector3<f64>],
    config: &RansacConfig,
) -> Result<PlaneFit> {
    let n = translations.len();
    if n < 3 {
        return Err(GroundPoseError::InsufficientData(format!(
            "translation plane needs at least 3 objects, got {n}"
        )));
    }
    let dist = |plane: &Plane| {
        let plane = *plane;
        let nn = plane.normal().norm();
        move |t: &Vector3<f64>| (plane.normal().dot(t) + plane.offset()) / nn
    };
    let mut best: Option<(usize, f64)> = None;
    let mut best_plane = None;
    for [i, j, k] in triples(n, config) {
        let Some(plane) = plane_through(&translations[i], &translations[j], &translations[k]) else {
            continue;
        };
        let (count, cost, _) = score(translations, dist(&plane), config.distance_threshold);
        if better((count, cost), best) {
            best = Some((count, cost));
            best_plane = Some(plane);
        }
    }
    let Some(hypothesis) = best_plane else {
        return Err(GroundPoseError::Degenerate(
            "every sampled triple of translations is collinear".into(),
        ));
    };
    let mut plane = normalize_plane(&hypothesis)?;
    let (_, _, mut mask) = score(translations, dist(&plane), config.distance_threshold);
    for _ in 0..2 {
        let inl: Vec<Vector3<f64>> = translations
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| *t)
            .collect();
        let Ok(refit) = fit_plane_tls(&inl) else {
            break;
        };
        let (count, _, refit_mask) = score(translations, dist(&refit), config.distance_threshold);
        if count < 3 {
            break;
        }
        plane = refit;
        if refit_mask == mask {
            break;
        }
        mask = refit_mask;
    }
    Ok(PlaneFit {
        plane,
        inliers: mask,
    })
}

fn axis_angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Consensus on object up-axes; the offset puts the plane through the
/// centroid of the inlier translations.
pub fn ransac_plane_from_rotations(
    states: &[ObjectState],
    config: &RansacConfig,
) -> Result<PlaneFit> {
    let n = states.len();
    if n == 0 {
        return Err(GroundPoseError::InsufficientData(
            "rotation plane needs at least one object".into(),
        ));
    }
    let ups: Vec<Vector3<f64>> = states.iter().map(object_up_axis).collect();
    let hypotheses: Vec<usize> = if n <= config.iterations.max(1) {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        (0..config.iterations)
            .map(|_| sample(&mut rng, n, 1).index(0))
            .collect()
    };
    let mut best: Option<(usize, f64)> = None;
    let mut best_mask = vec![false; n];
    for h in hypotheses {
        let axis = ups[h];
        let (count, cost, mask) = score(&ups, |u| axis_angle_between(u, &axis), config.angle_threshold);
        if better((count, cost), best) {
            best = Some((count, cost));
            best_mask = mask;
        }
    }
    let mean_axis = |mask: &[bool]| -> Vector3<f64> {
        ups.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(u, _)| *u)
            .sum::<Vector3<f64>>()
    };
    let mut normal = mean_axis(&best_mask);
    if normal.norm() == 0.0 {
        return Err(GroundPoseError::Degenerate("inlier up-axes cancel out".into()));
    }
    normal.normalize_mut();
    let (count, _, refit_mask) = score(&ups, |u| axis_angle_between(u, &normal), config.angle_threshold);
    if count > 0 && refit_mask != best_mask {
        let refit = mean_axis(&refit_mask);
        if refit.norm() > 0.0 {
            normal = refit.normalize();
            best_mask = refit_mask;
        }
    }
    let members: Vec<&ObjectState> = states
        .iter()
        .zip(&best_mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| s)
        .collect();
    let centroid =
        members.iter().map(|s| s.translation).sum::<Vector3<f64>>() / members.len() as f64;
    let plane = normalize_plane(&Plane::from_normal_offset(normal, -normal.dot(&centroid)))?;
    Ok(PlaneFit {
        plane,
        inliers: best_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> RansacConfig {
        RansacConfig {
            iterations: 200,
            distance_threshold: 0.3,
            angle_threshold: 10f64.to_radians(),
            seed: 7,
        }
    }

    #[test]
    fn distance_examples() {
        let t = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(point_plane_distance(&t, &Plane::new(0.0, 0.0, 1.0, 0.0)).unwrap(), 3.0);
        assert_eq!(point_plane_distance(&t, &Plane::new(0.0, 0.0, 2.0, 0.0)).unwrap(), 3.0);
        assert_eq!(
            point_plane_distance(&Vector3::zeros(), &Plane::new(0.0, 0.0, 1.0, -5.0)).unwrap(),
            -5.0
        );
        assert!(matches!(
            point_plane_distance(&t, &Plane::new(0.0, 0.0, 0.0, 1.0)),
            Err(GroundPoseError::InvalidPlane)
        ));
    }

    #[test]
    fn angle_examples() {
        let plane = Plane::new(0.0, 0.0, 1.0, 3.0);
        assert_eq!(normal_angle(&Vector3::new(0.0, 0.0, 1.0), &plane).unwrap(), 0.0);
        let a = normal_angle(&Vector3::new(1.0, 0.0, 0.0), &plane).unwrap();
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let up = Vector3::new(0.0, 0.1f64.sin(), 0.1f64.cos());
        assert!((normal_angle(&up, &plane).unwrap() - 0.1).abs() < 1e-12);
        assert!(normal_angle(&Vector3::zeros(), &plane).is_err());
    }

    #[test]
    fn normalize_examples() {
        let p = normalize_plane(&Plane::new(0.0, 0.0, 2.0, -4.0)).unwrap();
        assert_eq!(p, Plane::new(0.0, 0.0, -1.0, 2.0));
        let p = normalize_plane(&Plane::new(0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(p, Plane::new(0.0, 0.0, 1.0, 0.0));
        let p = normalize_plane(&Plane::new(0.0, 0.0, -3.0, 0.0)).unwrap();
        assert_eq!(p, Plane::new(0.0, 0.0, 1.0, 0.0));
        assert!(normalize_plane(&Plane::new(0.0, 0.0, 0.0, 2.0)).is_err());
    }

    #[test]
    fn exact_points_on_horizontal_plane() {
        let pts: Vec<_> = (0..8)
            .map(|i| Vector3::new((i as f64 * 1.7).sin() * 5.0, (i as f64 * 0.9).cos() * 4.0, 2.0))
            .collect();
        let fit = ransac_plane_from_translations(&pts, &cfg()).unwrap();
        assert!((fit.plane.coeffs - Plane::new(0.0, 0.0, -1.0, 2.0).coeffs).norm() < 1e-12);
        assert!(fit.inliers.iter().all(|&b| b));
    }

    #[test]
    fn gross_outliers_are_masked() {
        let mut pts: Vec<_> = (0..10)
            .map(|i| {
                let x = (i as f64 * 2.3).sin() * 6.0;
                let z = 10.0 + (i as f64 * 1.1).cos() * 5.0;
                Vector3::new(x, 1.5 - 0.1 * z, z)
            })
            .collect();
        let n = Vector3::new(0.0, 1.0, 0.1).normalize();
        pts.push(pts[2] + n * 5.0);
        pts.push(pts[6] - n * 5.0);
        let fit = ransac_plane_from_translations(&pts, &cfg()).unwrap();
        let expected: Vec<bool> = (0..12).map(|i| i < 10).collect();
        assert_eq!(fit.inliers, expected);
    }

    #[test]
    fn three_points_give_exact_plane() {
        let pts = [
            Vector3::new(0.0, 1.0, 5.0),
            Vector3::new(2.0, 1.5, 9.0),
            Vector3::new(-3.0, 0.2, 7.0),
        ];
        let fit = ransac_plane_from_translations(&pts, &cfg()).unwrap();
        for p in &pts {
            assert!(point_plane_distance(p, &fit.plane).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn translation_ransac_errors() {
        let pts = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)];
        assert!(matches!(
            ransac_plane_from_translations(&pts, &cfg()),
            Err(GroundPoseError::InsufficientData(_))
        ));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(matches!(
            ransac_plane_from_translations(&line, &cfg()),
            Err(GroundPoseError::Degenerate(_))
        ));
    }

    fn upright(yaw: f64, t: Vector3<f64>) -> ObjectState {
        ObjectState::rigid(rotation::exp(&Vector3::new(0.0, 0.0, yaw)), t, 0)
    }

    #[test]
    fn rotation_plane_with_aligned_axes() {
        let states: Vec<_> = (0..5)
            .map(|i| upright(i as f64, Vector3::new(i as f64, -(i as f64), 2.0)))
            .collect();
        let fit = ransac_plane_from_rotations(&states, &cfg()).unwrap();
        assert!((fit.plane.coeffs - Plane::new(0.0, 0.0, -1.0, 2.0).coeffs).norm() < 1e-12);
    }

    #[test]
    fn tilted_axis_is_excluded() {
        let mut states: Vec<_> = (0..9)
            .map(|i| upright(0.7 * i as f64, Vector3::new(i as f64, 0.5 * i as f64, 2.0)))
            .collect();
        let tilt = rotation::exp(&Vector3::new(40f64.to_radians(), 0.0, 0.0));
        states.push(ObjectState::rigid(tilt, Vector3::new(3.0, 3.0, 2.0), 0));
        let fit = ransac_plane_from_rotations(&states, &cfg()).unwrap();
        assert!(fit.inliers[..9].iter().all(|&b| b));
        assert!(!fit.inliers[9]);
    }

    #[test]
    fn single_object_rotation_plane() {
        let r = rotation::exp(&Vector3::new(0.2, -0.4, 1.0));
        let t = Vector3::new(1.0, 2.0, 8.0);
        let state = ObjectState::rigid(r, t, 0);
        let fit = ransac_plane_from_rotations(std::slice::from_ref(&state), &cfg()).unwrap();
        assert!(point_plane_distance(&t, &fit.plane).unwrap().abs() < 1e-12);
        assert!(normal_angle(&object_up_axis(&state), &fit.plane).unwrap() < 1e-7);
        assert!(ransac_plane_from_rotations(&[], &cfg()).is_err());
    }

    #[test]
    fn sampled_ransac_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..40)
            .map(|_| {
                let x: f64 = rng.random_range(-10.0..10.0);
                let z: f64 = rng.random_range(5.0..40.0);
                let noise: f64 = rng.random_range(-0.5..0.5);
                Vector3::new(x, 1.5 - 0.2 * z + noise, z)
            })
            .collect();
        let mut config = cfg();
        config.iterations = 50;
        let a = ransac_plane_from_translations(&pts, &config).unwrap();
        let b = ransac_plane_from_translations(&pts, &config).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn normalization_preserves_distance(
            a in -5.0f64..5.0, b in -5.0f64..5.0, c in 0.1f64..5.0, d in -10.0f64..10.0,
            x in -20.0f64..20.0, y in -20.0f64..20.0, z in -20.0f64..20.0,
        ) {
            let plane = Plane::new(a, b, c, d);
            let t = Vector3::new(x, y, z);
            let before = point_plane_distance(&t, &plane).unwrap();
            let normalized = normalize_plane(&plane).unwrap();
            let after = point_plane_distance(&t, &normalized).unwrap();
            // the sign rule may flip orientation; the plane and |distance| are unchanged
            prop_assert!((before.abs() - after.abs()).abs() < 1e-9 * (1.0 + before.abs()));
            prop_assert!((normalized.normal().norm() - 1.0).abs() < 1e-12);
            prop_assert!(normalized.offset() >= 0.0);
        }

        #[test]
        fn angle_symmetric_under_flip(ux in -1.0f64..1.0, uy in -1.0f64..1.0, uz in 0.1f64..1.0) {
            let up = Vector3::new(ux, uy, uz);
            let plane = Plane::new(0.3, -0.2, 0.9, 1.0);
            let a = normal_angle(&up, &plane).unwrap();
            let b = normal_angle(&-up, &plane).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
