//! Small rotation/transform toolkit shared by the rig, binding and fitting code.
//!
//! Quaternions are scalar-first `(w, x, y, z)`, right-handed, and act on
//! column vectors. Gradient helpers return derivatives with respect to the
//! raw quaternion components in the same order.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = Quaternion<f64>;

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn quat_from_array(q: [f64; 4]) -> Quat {
    Quaternion::new(q[0], q[1], q[2], q[3])
}

#[inline]
pub fn quat_to_array(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

#[inline]
pub fn quat_to_vec4(q: &Quat) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}

#[inline]
pub fn vec4_to_quat(v: &Vector4<f64>) -> Quat {
    Quaternion::new(v[0], v[1], v[2], v[3])
}

pub fn axis_angle_quat(axis: Vec3, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    Quaternion::new(c, a.x * s, a.y * s, a.z * s)
}

/// Rotation matrix of a quaternion. The input is treated as if it were
/// normalised first.
pub fn quat_to_mat(q: &Quat) -> Mat3 {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    unit_quat_to_mat(w, x, y, z)
}

#[inline]
fn unit_quat_to_mat(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of the (unit-quaternion) rotation polynomial with
/// respect to `w, x, y, z`.
fn rotation_partials(w: f64, x: f64, y: f64, z: f64) -> [Mat3; 4] {
    let t = 2.0;
    [
        Matrix3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Matrix3::new(
            0.0,
            t * y,
            t * z,
            t * y,
            -2.0 * t * x,
            -t * w,
            t * z,
            t * w,
            -2.0 * t * x,
        ),
        Matrix3::new(
            -2.0 * t * y,
            t * x,
            t * w,
            t * x,
            0.0,
            t * z,
            -t * w,
            t * z,
            -2.0 * t * y,
        ),
        Matrix3::new(
            -2.0 * t * z,
            -t * w,
            t * x,
            t * w,
            -2.0 * t * z,
            t * y,
            t * x,
            t * y,
            0.0,
        ),
    ]
}

/// Backpropagates `d_rot = dL/dR` through `R = quat_to_mat(q)`, including the
/// implicit normalisation of `q`.
pub fn quat_to_mat_backward(q: &Quat, d_rot: &Mat3) -> Vector4<f64> {
    let n = q.norm();
    let u = Vector4::new(q.w / n, q.i / n, q.j / n, q.k / n);
    let partials = rotation_partials(u[0], u[1], u[2], u[3]);
    let mut d_unit = Vector4::zeros();
    for (k, p) in partials.iter().enumerate() {
        d_unit[k] = p.component_mul(d_rot).sum();
    }
    (d_unit - u * u.dot(&d_unit)) / n
}

/// Derivative of `R(q)` for a unit `q` without the normalisation projection.
/// Only meaningful along directions tangent to the unit sphere.
pub fn unit_quat_rotation_partials(q: &Quat) -> [Mat3; 4] {
    rotation_partials(q.w, q.i, q.j, q.k)
}

/// `q / |q|` and the backward map `dL/dq = (I - q̂q̂ᵀ) dL/dq̂ / |q|`.
pub fn normalize_backward(q: &Quat, d_unit: &Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = quat_to_vec4(q) / n;
    (d_unit - u * u.dot(d_unit)) / n
}

/// Matrix `L(p)` with `p ⊗ q = L(p) q` in `(w, x, y, z)` order.
pub fn left_mul_matrix(p: &Quat) -> nalgebra::Matrix4<f64> {
    let (w, x, y, z) = (p.w, p.i, p.j, p.k);
    nalgebra::Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Matrix `R(q)` with `p ⊗ q = R(q) p` in `(w, x, y, z)` order.
pub fn right_mul_matrix(q: &Quat) -> nalgebra::Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    nalgebra::Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

pub fn mat_to_quat(m: &Mat3) -> Quat {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
    let uq = UnitQuaternion::from_rotation_matrix(&rot);
    let q = uq.into_inner();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Rotation vector (axis × angle) of a unit quaternion, angle in `[0, π]`.
pub fn log_map(q: &Quat) -> Vec3 {
    let q = if q.w < 0.0 { -*q } else { *q };
    let v = Vec3::new(q.i, q.j, q.k);
    let s = v.norm();
    if s < 1e-12 {
        return v * 2.0;
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

pub fn exp_map(r: &Vec3) -> Quat {
    let angle = r.norm();
    if angle < 1e-12 {
        let q = Quaternion::new(1.0, 0.5 * r.x, 0.5 * r.y, 0.5 * r.z);
        return q / q.norm();
    }
    axis_angle_quat(*r / angle, angle)
}

/// Geodesic angle between two rotations, in radians.
pub fn geodesic_angle(a: &Quat, b: &Quat) -> f64 {
    let d = (a.normalize().coords.dot(&b.normalize().coords)).abs().min(1.0);
    2.0 * d.acos()
}

/// Splits `q` into `swing ⊗ twist` where `twist` rotates about `axis`.
/// Returns `(swing, twist)`. A pure 180° swing has no defined twist; the
/// identity is returned for it.
pub fn swing_twist(q: &Quat, axis: &Vec3) -> (Quat, Quat) {
    let a = axis.normalize();
    let v = Vec3::new(q.i, q.j, q.k);
    let p = a * v.dot(&a);
    let twist = Quaternion::new(q.w, p.x, p.y, p.z);
    let n = twist.norm();
    let twist = if n < 1e-14 {
        Quaternion::identity()
    } else {
        twist / n
    };
    let swing = q * twist.conjugate();
    (swing, twist)
}

/// Signed twist angle of `q` about `axis`, in `(-π, π]`.
pub fn twist_angle(q: &Quat, axis: &Vec3) -> f64 {
    let a = axis.normalize();
    let (mut w, mut s) = (q.w, Vec3::new(q.i, q.j, q.k).dot(&a));
    if w < 0.0 {
        w = -w;
        s = -s;
    }
    2.0 * s.atan2(w)
}

/// Gradient of [`twist_angle`] with respect to `(w, x, y, z)`.
pub fn twist_angle_grad(q: &Quat, axis: &Vec3) -> Vector4<f64> {
    let a = axis.normalize();
    let (w, s) = (q.w, Vec3::new(q.i, q.j, q.k).dot(&a));
    let n = w * w + s * s;
    if n < 1e-28 {
        return Vector4::zeros();
    }
    let ds = 2.0 * w / n;
    let dw = -2.0 * s / n;
    Vector4::new(dw, ds * a.x, ds * a.y, ds * a.z)
}

/// `sin(twist_angle)` in closed form: `2 w s / (w² + s²)`.
pub fn twist_sine(q: &Quat, axis: &Vec3) -> f64 {
    let a = axis.normalize();
    let (w, s) = (q.w, Vec3::new(q.i, q.j, q.k).dot(&a));
    let n = w * w + s * s;
    if n < 1e-28 {
        0.0
    } else {
        2.0 * w * s / n
    }
}

pub fn twist_sine_grad(q: &Quat, axis: &Vec3) -> Vector4<f64> {
    let a = axis.normalize();
    let (w, s) = (q.w, Vec3::new(q.i, q.j, q.k).dot(&a));
    let n = w * w + s * s;
    if n < 1e-28 {
        return Vector4::zeros();
    }
    let n2 = n * n;
    let dw = 2.0 * s * (s * s - w * w) / n2;
    let ds = 2.0 * w * (w * w - s * s) / n2;
    Vector4::new(dw, ds * a.x, ds * a.y, ds * a.z)
}

/// Swing angle of a unit quaternion about `axis`: `2 acos(sqrt(w² + s²))`.
pub fn swing_angle(q: &Quat, axis: &Vec3) -> f64 {
    let a = axis.normalize();
    let (w, s) = (q.w, Vec3::new(q.i, q.j, q.k).dot(&a));
    2.0 * (w * w + s * s).sqrt().min(1.0).acos()
}

pub fn swing_angle_grad(q: &Quat, axis: &Vec3) -> Vector4<f64> {
    let a = axis.normalize();
    let (w, s) = (q.w, Vec3::new(q.i, q.j, q.k).dot(&a));
    let m2 = w * w + s * s;
    let m = m2.sqrt();
    if !(1e-15..1.0 - 1e-15).contains(&m) {
        return Vector4::zeros();
    }
    let dm = -2.0 / (1.0 - m2).sqrt();
    let dw = dm * w / m;
    let ds = dm * s / m;
    Vector4::new(dw, ds * a.x, ds * a.y, ds * a.z)
}

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_quat(q: &Quat, translation: Vec3) -> Self {
        Self::new(quat_to_mat(q), translation)
    }

    pub fn translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`
    #[inline]
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(m: &[f64; 12]) -> Self {
        Self::new(
            Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            Vec3::new(m[3], m[7], m[11]),
        )
    }

    /// Camera looking from `eye` at `target`; camera axes x-right, y-down,
    /// z-forward. Returns the world-to-camera transform.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(rot, -(rot * eye))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_quat(seed: u64) -> Quat {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        q / q.norm()
    }

    #[test]
    fn quat_matrix_matches_nalgebra() {
        for s in 0..20 {
            let q = rand_quat(s);
            let ours = quat_to_mat(&q);
            let theirs = UnitQuaternion::new_normalize(q).to_rotation_matrix().into_inner();
            assert!((ours - theirs).norm() < 1e-12);
        }
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let q = rand_quat(3) * 1.3;
        let g = Mat3::new(0.3, -0.2, 0.5, 0.1, 0.9, -0.4, 0.7, 0.2, -0.6);
        let analytic = quat_to_mat_backward(&q, &g);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = quat_to_vec4(&q);
            let mut qm = qp;
            qp[k] += h;
            qm[k] -= h;
            let fp = quat_to_mat(&vec4_to_quat(&qp)).component_mul(&g).sum();
            let fm = quat_to_mat(&vec4_to_quat(&qm)).component_mul(&g).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-7, "{k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn product_matrices_agree_with_hamilton_product() {
        let p = rand_quat(1);
        let q = rand_quat(2);
        let pq = quat_to_vec4(&(p * q));
        assert!((left_mul_matrix(&p) * quat_to_vec4(&q) - pq).norm() < 1e-14);
        assert!((right_mul_matrix(&q) * quat_to_vec4(&p) - pq).norm() < 1e-14);
    }

    #[test]
    fn swing_twist_recomposes() {
        let axis = Vec3::new(0.2, 1.0, -0.3);
        for s in 0..50 {
            let q = rand_quat(100 + s);
            let (swing, twist) = swing_twist(&q, &axis);
            let back = swing * twist;
            let d = (back.coords - q.coords).norm().min((back.coords + q.coords).norm());
            assert!(d < 1e-9);
            // the swing carries no rotation about the axis
            let sv = Vec3::new(swing.i, swing.j, swing.k);
            assert!(sv.dot(&axis.normalize()).abs() < 1e-9);
        }
    }

    #[test]
    fn twist_sine_closed_form_matches_angle() {
        let axis = Vec3::y();
        for s in 0..50 {
            let q = rand_quat(200 + s);
            let a = twist_angle(&q, &axis);
            assert!((a.sin() - twist_sine(&q, &axis)).abs() < 1e-12);
        }
    }

    #[test]
    fn twist_and_swing_gradients_match_finite_differences() {
        let axis = Vec3::new(0.0, 1.0, 0.0);
        let q = rand_quat(9);
        let h = 1e-6;
        type F = fn(&Quat, &Vec3) -> f64;
        type G = fn(&Quat, &Vec3) -> Vector4<f64>;
        let pairs: [(F, G); 2] = [
            (twist_angle, twist_angle_grad),
            (twist_sine, twist_sine_grad),
        ];
        for (f, g) in pairs {
            let an = g(&q, &axis);
            for k in 0..4 {
                let mut qp = quat_to_vec4(&q);
                let mut qm = qp;
                qp[k] += h;
                qm[k] -= h;
                let fd = (f(&vec4_to_quat(&qp), &axis) - f(&vec4_to_quat(&qm), &axis)) / (2.0 * h);
                assert!((fd - an[k]).abs() < 1e-6, "{k}: {fd} vs {}", an[k]);
            }
        }
        // the swing angle formula assumes unit norm, so check it along tangents only
        let an = swing_angle_grad(&q, &axis);
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            let qp = q * exp_map(&e);
            let qm = q * exp_map(&(-e));
            let fd = (swing_angle(&qp, &axis) - swing_angle(&qm, &axis)) / (2.0 * h);
            let mut dir = Quaternion::new(0.0, 0.0, 0.0, 0.0);
            dir.coords[a] = 0.5; // (i, j, k, w) storage
            let tangent = quat_to_vec4(&(q * dir));
            assert!((fd - an.dot(&tangent)).abs() < 1e-6);
        }
    }

    #[test]
    fn log_exp_round_trip() {
        for s in 0..20 {
            let q = rand_quat(300 + s);
            let r = log_map(&q);
            let back = exp_map(&r);
            assert!(geodesic_angle(&q, &back) < 1e-7);
        }
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = RigidTransform::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::zeros(), Vec3::y());
        let p = cam.apply(&Vec3::zeros());
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert!((cam.rotation.determinant() - 1.0).abs() < 1e-12);
    }
}
