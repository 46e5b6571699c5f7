//! Axis-angle rotations.
//!
//! `R(w) = I + a(θ)[w]× + b(θ)[w]×²` with `θ = |w|`, `a = sin θ / θ` and
//! `b = (1 - cos θ) / θ²`. Both coefficients (and the derivative terms used by
//! the Jacobian) switch to Taylor series below `SMALL_ANGLE`, so the map and its
//! derivatives are smooth through the origin. Inputs are never wrapped into
//! `[0, π]`.

use nalgebra::{Matrix3, Rotation3, Vector3};

const SMALL_ANGLE: f64 = 1e-4;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Returns `(a, b, a'(θ)/θ, b'(θ)/θ)`.
fn coefficients(theta: f64) -> (f64, f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let da = -1.0 / 3.0 + t2 / 30.0;
        let db = -1.0 / 12.0 + t2 / 180.0;
        (a, b, da, db)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let a = s / theta;
        let b = (1.0 - c) / t2;
        let da = (theta * c - s) / (t2 * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, da, db)
    }
}

/// Rodrigues formula: axis-angle vector (radians) to rotation matrix.
pub fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = coefficients(w.norm());
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix together with its partial derivatives `∂R/∂w_i`.
pub fn rodrigues_with_jacobian(w: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, da, db) = coefficients(w.norm());
    let k = skew(w);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let mut d = [Matrix3::zeros(); 3];
    for (i, di) in d.iter_mut().enumerate() {
        let e = skew(&Vector3::ith(i, 1.0));
        *di = k * (da * w[i]) + e * a + k2 * (db * w[i]) + (e * k + k * e) * b;
    }
    (r, d)
}

/// Inverse of [`rodrigues`] on proper rotations, returning the angle in `[0, π]`.
pub fn axis_angle_from_matrix(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}
