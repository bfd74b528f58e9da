//! Small SO(3) toolkit: exponential map, projection onto SO(3), geodesic distance.

use nalgebra::{Matrix3, Rotation3, Vector3};

/// Skew-symmetric matrix with `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential of a rotation vector.
pub fn exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*omega).into_inner()
}

/// Left-multiplicative increment `exp(delta) * r`, re-orthonormalized.
pub fn retract_left(r: &Matrix3<f64>, delta: &Vector3<f64>) -> Matrix3<f64> {
    nearest_rotation(&(exp(delta) * r))
}

/// Orthogonal polar factor of `m` with the determinant forced to +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // flip the direction belonging to the smallest singular value
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let mut u = u;
        u.column_mut(k).neg_mut();
        r = u * v_t;
    }
    r
}

/// Geodesic angle between two rotations, in `[0, pi]`.
///
/// Equal to `acos((trace(a^T b) - 1) / 2)`, evaluated through `atan2` so small
/// angles keep full precision.
pub fn geodesic_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a.transpose() * b;
    let cos = (d.trace() - 1.0) * 0.5;
    let sin = 0.5
        * Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm();
    sin.atan2(cos)
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol * 3.0
}
