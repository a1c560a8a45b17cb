//! Small rotation helpers shared by the kinematics and camera code.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients (a, b, c) of the Rodrigues-type series
/// a = sin t / t, b = (1 - cos t) / t^2, c = (t - sin t) / t^3.
fn so3_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-4 {
        (
            1.0 - t2 / 6.0,
            0.5 - t2 / 24.0,
            1.0 / 6.0 - t2 / 120.0,
        )
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        (s / theta, 2.0 * half * half / t2, (theta - s) / (t2 * theta))
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let (a, b, _) = so3_coefficients(w.norm());
    let k = skew(w);
    Mat3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3): `exp(w + d) ~= exp(J_l(w) d) exp(w)`.
///
/// So `d/dw (exp(w) u) = -[exp(w) u]x J_l(w)`.
pub fn so3_left_jacobian(w: &Vec3) -> Mat3 {
    let (_, b, c) = so3_coefficients(w.norm());
    let k = skew(w);
    Mat3::identity() + k * b + k * k * c
}

/// Axis-angle vector of a rotation matrix.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        return v * 0.5;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // near pi: take the axis from the symmetric part
        let s = (r + Mat3::identity()) * 0.5;
        let mut best = 0;
        for i in 1..3 {
            if s[(i, i)] > s[(best, best)] {
                best = i;
            }
        }
        let mut axis = s.column(best).into_owned();
        axis /= axis.norm();
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    v * (theta / (2.0 * theta.sin()))
}
