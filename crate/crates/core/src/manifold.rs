//! Rotation and rigid-motion primitives.
//!
//! Rotation vectors, rotation matrices and Hamilton unit quaternions
//! (scalar first) plus the closed forms the factors need: exponential and
//! logarithm maps, the right Jacobian of SO(3) and its inverse, quaternion
//! product matrices and the retraction used by the solver.
//!
//! All closed forms switch to second-order Taylor expansions below
//! [`SMALL_ANGLE`] radians.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

/// Angle below which closed forms use their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Distance from π under which `log_so3` extracts the axis from `R + Rᵀ`.
const NEAR_PI: f64 = 1e-3;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Skew-symmetric matrix `⌊v⌋ₓ`, so that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Fails when `m` is not antisymmetric within 1e-9.
pub fn vee(m: &Mat3) -> Result<Vec3> {
    let asym = (m + m.transpose()).abs().max();
    if asym > 1e-9 || m.diagonal().abs().max() > 1e-9 {
        return Err(Error::NotSkewSymmetric(asym));
    }
    Ok(Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// `vee` of the antisymmetric part `(m - mᵀ)`, without the check.
fn vee_of_difference(m: &Mat3) -> Vec3 {
    Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// Rodrigues' formula.
pub fn exp_so3(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(phi);
    Mat3::identity() + k * a + k * k * b
}

/// Logarithm of a rotation matrix, with `‖φ‖ ≤ π`.
///
/// At exactly π the sign is fixed so the last nonzero axis component is
/// nonnegative.
pub fn log_so3(r: &Mat3) -> Vec3 {
    let w = vee_of_difference(r); // 2 sinθ · axis
    let s = 0.5 * w.norm();
    let c = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE {
        return w * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if PI - theta > NEAR_PI {
        return w * (theta / (2.0 * theta.sin()));
    }

    // Near π: nnᵀ = (S - cosθ I) / (1 - cosθ) with S the symmetric part.
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Mat3::identity() * c) / (1.0 - c);
    let i = outer.diagonal().imax();
    let mut axis: Vec3 = outer.column(i).into_owned() / outer[(i, i)].max(0.0).sqrt();
    axis.normalize_mut();
    if s > 1e-12 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else if let Some(last) = axis.iter().rev().find(|x| x.abs() > 1e-12) {
        if *last < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Right Jacobian `H(φ)` of SO(3).
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = hat(phi);
    Mat3::identity() - k * a + k * k * b
}

/// Closed-form inverse `H⁻¹(φ)` of the right Jacobian.
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let b = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    let k = hat(phi);
    Mat3::identity() + k * 0.5 + k * k * b
}

/// `Ω(ω)` such that `q̇ = ½ Ω(ω) q` for body rate `ω`.
pub fn omega_matrix(w: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-w.transpose()));
    m.fixed_view_mut::<3, 1>(1, 0).copy_from(w);
    m.fixed_view_mut::<3, 3>(1, 1).copy_from(&(-hat(w)));
    m
}

/// Bottom-right `3×3` block of a `4×4` quaternion product matrix.
pub fn brc3(m: &Matrix4<f64>) -> Mat3 {
    m.fixed_view::<3, 3>(1, 1).into_owned()
}

/// Hamilton quaternion `(w, v)` with scalar part first.
///
/// Most constructors normalize. The sign is left alone by arithmetic;
/// [`Quat::canonical`] fixes `w ≥ 0` where a unique representative is needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub v: Vec3,
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub const fn identity() -> Self {
        Quat {
            w: 1.0,
            v: Vector3::new(0.0, 0.0, 0.0),
        }
    }

    /// Builds and normalizes `(w, x, y, z)`.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat {
            w,
            v: Vec3::new(x, y, z),
        }
        .normalized()
    }

    /// Takes `(w, x, y, z)` as-is.
    pub const fn from_parts_unchecked(w: f64, v: Vec3) -> Self {
        Quat { w, v }
    }

    pub fn from_coords(c: &Vector4<f64>) -> Self {
        Quat::new(c[0], c[1], c[2], c[3])
    }

    /// `(w, x, y, z)`.
    pub fn coords(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.v.x, self.v.y, self.v.z)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.v.norm_squared()).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quat {
            w: self.w / n,
            v: self.v / n,
        }
    }

    pub fn inverse(&self) -> Self {
        Quat {
            w: self.w,
            v: -self.v,
        }
    }

    /// Same rotation with `w ≥ 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Quat {
                w: -self.w,
                v: -self.v,
            }
        } else {
            *self
        }
    }

    /// `⌊q⌋_L`, so that `q ∘ p = ⌊q⌋_L p`.
    pub fn left_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m[(0, 0)] = self.w;
        m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-self.v.transpose()));
        m.fixed_view_mut::<3, 1>(1, 0).copy_from(&self.v);
        m.fixed_view_mut::<3, 3>(1, 1)
            .copy_from(&(Mat3::identity() * self.w + hat(&self.v)));
        m
    }

    /// `⌊q⌋_R`, so that `p ∘ q = ⌊q⌋_R p`.
    pub fn right_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m[(0, 0)] = self.w;
        m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-self.v.transpose()));
        m.fixed_view_mut::<3, 1>(1, 0).copy_from(&self.v);
        m.fixed_view_mut::<3, 3>(1, 1)
            .copy_from(&(Mat3::identity() * self.w - hat(&self.v)));
        m
    }

    /// Rotation matrix `(2w² − 1)I + 2w⌊v⌋ₓ + 2vvᵀ`.
    pub fn to_rotation(&self) -> Mat3 {
        Mat3::identity() * (2.0 * self.w * self.w - 1.0)
            + hat(&self.v) * (2.0 * self.w)
            + self.v * self.v.transpose() * 2.0
    }

    /// Quaternion of a rotation matrix.
    ///
    /// Uses the trace formula while `w` is well away from zero and the
    /// largest-diagonal branch otherwise.
    pub fn from_rotation(r: &Mat3) -> Self {
        let tr = r.trace();
        if tr + 1.0 > 0.5 {
            let w = 0.5 * (tr + 1.0).sqrt();
            let d = 4.0 * w;
            return Quat::new(
                w,
                (r[(2, 1)] - r[(1, 2)]) / d,
                (r[(0, 2)] - r[(2, 0)]) / d,
                (r[(1, 0)] - r[(0, 1)]) / d,
            );
        }
        let diag = r.diagonal();
        let i = diag.imax();
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let s = 0.5 * (1.0 + r[(i, i)] - r[(j, j)] - r[(k, k)]).max(0.0).sqrt();
        let d = 4.0 * s;
        let mut v = Vec3::zeros();
        v[i] = s;
        v[j] = (r[(j, i)] + r[(i, j)]) / d;
        v[k] = (r[(k, i)] + r[(i, k)]) / d;
        let w = (r[(k, j)] - r[(j, k)]) / d;
        Quat { w, v }.normalized()
    }

    /// `E(φ)`, the quaternion of `Exp(φ)`.
    pub fn from_rotation_vector(phi: &Vec3) -> Self {
        let theta = phi.norm();
        if theta < SMALL_ANGLE {
            return Quat { w: 1.0, v: phi * 0.5 }.normalized();
        }
        let half = 0.5 * theta;
        Quat {
            w: half.cos(),
            v: phi * (half.sin() / theta),
        }
    }

    /// Rotation vector of this quaternion, `Log(R(q))`.
    pub fn to_rotation_vector(&self) -> Vec3 {
        let q = self.canonical();
        let s = q.v.norm();
        if s < SMALL_ANGLE {
            return q.v * (2.0 / q.w);
        }
        q.v * (2.0 * s.atan2(q.w) / s)
    }

    /// Exact retraction `q ∘ E(δθ)`.
    pub fn retract(&self, dtheta: &Vec3) -> Self {
        (*self * Quat::from_rotation_vector(dtheta)).normalized()
    }

    /// First-order retraction `q ∘ [1, ½δθ]`, normalized.
    pub fn retract_approx(&self, dtheta: &Vec3) -> Self {
        (*self
            * Quat {
                w: 1.0,
                v: dtheta * 0.5,
            })
        .normalized()
    }

    pub fn rotate(&self, p: &Vec3) -> Vec3 {
        self.to_rotation() * p
    }

    /// Yaw of the z-y-x Euler decomposition.
    pub fn yaw(&self) -> f64 {
        let r = self.to_rotation();
        r[(1, 0)].atan2(r[(0, 0)])
    }

    /// Angle of the relative rotation between `self` and `other`.
    pub fn angle_to(&self, other: &Quat) -> f64 {
        (self.inverse() * *other).to_rotation_vector().norm()
    }
}

impl Mul for Quat {
    type Output = Quat;

    fn mul(self, p: Quat) -> Quat {
        Quat {
            w: self.w * p.w - self.v.dot(&p.v),
            v: p.v * self.w + self.v * p.w + self.v.cross(&p.v),
        }
    }
}

/// Rotation about the world z axis.
pub fn yaw_quat(yaw: f64) -> Quat {
    Quat::from_rotation_vector(&Vec3::new(0.0, 0.0, yaw))
}

/// Quaternion of the z-y-x Euler angles `(roll, pitch, yaw)`.
pub fn quat_from_euler(roll: f64, pitch: f64, yaw: f64) -> Quat {
    yaw_quat(yaw)
        * Quat::from_rotation_vector(&Vec3::new(0.0, pitch, 0.0))
        * Quat::from_rotation_vector(&Vec3::new(roll, 0.0, 0.0))
}

/// Element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
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
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_quat(q: &Quat, translation: Vec3) -> Self {
        RigidTransform {
            rotation: q.to_rotation(),
            translation,
        }
    }

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

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_vec(r: &mut impl Rng, scale: f64) -> Vec3 {
        Vec3::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        ) * scale
    }

    fn rand_quat(r: &mut impl Rng) -> Quat {
        Quat::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        )
    }

    /// Truncated power series of the matrix exponential.
    fn exp_series(phi: &Vec3, terms: usize) -> Mat3 {
        let k = hat(phi);
        let mut acc = Mat3::identity();
        let mut term = Mat3::identity();
        for n in 1..terms {
            term = term * k / n as f64;
            acc += term;
        }
        acc
    }

    #[test]
    fn hat_matches_definition_and_cross_product() {
        assert_eq!(hat(&Vec3::zeros()), Mat3::zeros());
        assert_eq!(
            hat(&Vec3::new(1.0, 0.0, 0.0)),
            Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
        let mut r = rng();
        for _ in 0..100 {
            let a = rand_vec(&mut r, 3.0);
            let b = rand_vec(&mut r, 3.0);
            assert!((hat(&a) * b - a.cross(&b)).norm() < 1e-14);
            let h = hat(&a);
            assert_eq!(h, -h.transpose());
        }
    }

    #[test]
    fn vee_roundtrip_and_rejects_symmetric() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(vee(&hat(&v)).unwrap(), v);
        assert_eq!(vee(&Mat3::zeros()).unwrap(), Vec3::zeros());
        let sym = Mat3::new(1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(vee(&sym), Err(Error::NotSkewSymmetric(_))));
    }

    #[test]
    fn exp_matches_power_series() {
        assert_eq!(exp_so3(&Vec3::zeros()), Mat3::identity());
        let phi = Vec3::new(PI / 2.0, 0.0, 0.0);
        assert!((exp_so3(&phi) - exp_series(&phi, 20)).abs().max() < 1e-12);
        let mut r = rng();
        for _ in 0..100 {
            let phi = rand_vec(&mut r, 2.0);
            assert!((exp_so3(&phi) - exp_series(&phi, 30)).abs().max() < 1e-12);
            let back = exp_so3(&phi) * exp_so3(&-phi);
            assert!((back - Mat3::identity()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn exp_is_a_rotation() {
        let mut r = rng();
        for _ in 0..100 {
            let m = exp_so3(&rand_vec(&mut r, 3.0));
            assert!((m.transpose() * m - Mat3::identity()).abs().max() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn log_inverts_exp() {
        assert_eq!(log_so3(&Mat3::identity()), Vec3::zeros());
        let phi = Vec3::new(0.3, -0.2, 0.1);
        assert!((log_so3(&exp_so3(&phi)) - phi).norm() < 1e-10);
        let mut r = rng();
        for _ in 0..1000 {
            let mut phi = rand_vec(&mut r, 1.0);
            let len = r.random_range(0.0..PI - 1e-6);
            if phi.norm() > 0.0 {
                phi = phi.normalize() * len;
            }
            let back = log_so3(&exp_so3(&phi));
            assert!((back - phi).norm() < 1e-9, "{phi} -> {back}");
        }
    }

    #[test]
    fn log_at_pi_uses_sign_convention() {
        let rz = exp_so3(&Vec3::new(0.0, 0.0, PI));
        let phi = log_so3(&rz);
        assert!((phi - Vec3::new(0.0, 0.0, PI)).norm() < 1e-9);
        assert!((exp_so3(&phi) - rz).abs().max() < 1e-9);

        let axis = Vec3::new(1.0, -2.0, -0.5).normalize();
        let r = exp_so3(&(axis * PI));
        let phi = log_so3(&r);
        assert!((phi.norm() - PI).abs() < 1e-9);
        assert!(phi.z >= 0.0);
        assert!((exp_so3(&phi) - r).abs().max() < 1e-9);
    }

    #[test]
    fn log_branches_agree_at_switchover() {
        let axis = Vec3::new(0.2, -0.7, 0.4).normalize();
        for theta in [
            SMALL_ANGLE * 0.999,
            SMALL_ANGLE * 1.001,
            PI - NEAR_PI * 1.001,
            PI - NEAR_PI * 0.999,
        ] {
            let phi = axis * theta;
            assert!((log_so3(&exp_so3(&phi)) - phi).norm() < 1e-9, "{theta}");
        }
        let a = right_jacobian(&(axis * SMALL_ANGLE * 0.999));
        let b = right_jacobian(&(axis * SMALL_ANGLE * 1.001));
        assert!((a - b).abs().max() < 5e-9);
        let a = right_jacobian_inv(&(axis * SMALL_ANGLE * 0.999));
        let b = right_jacobian_inv(&(axis * SMALL_ANGLE * 1.001));
        assert!((a - b).abs().max() < 5e-9);
        let a = exp_so3(&(axis * SMALL_ANGLE * 0.999));
        let b = exp_so3(&(axis * SMALL_ANGLE * 1.001));
        assert!((a - b).abs().max() < 5e-9);
    }

    #[test]
    fn right_jacobian_first_order_and_inverse() {
        assert_eq!(right_jacobian(&Vec3::zeros()), Mat3::identity());
        let mut r = rng();
        for _ in 0..100 {
            let phi = rand_vec(&mut r, 1.5);
            let dir = rand_vec(&mut r, 1.0);
            let err = |h: f64| {
                let d = dir * h;
                let lhs = log_so3(&(exp_so3(&phi).transpose() * exp_so3(&(phi + d))));
                (lhs - right_jacobian(&phi) * d).norm()
            };
            let (e1, e2) = (err(1e-3), err(5e-4));
            // Quadratic remainder: halving δ quarters the error.
            assert!(e1 / e2 > 3.0 && e1 / e2 < 5.0, "{e1} {e2}");

            let h = right_jacobian(&phi);
            let hinv = right_jacobian_inv(&phi);
            assert!((h * hinv - Mat3::identity()).abs().max() < 1e-10);
            let lu = h.try_inverse().unwrap();
            assert!((lu - hinv).abs().max() < 1e-9);
        }
    }

    #[test]
    fn adjoint_identities() {
        let mut r = rng();
        for _ in 0..100 {
            let rot = exp_so3(&rand_vec(&mut r, 2.0));
            let phi = rand_vec(&mut r, 1.0);
            assert!((hat(&(rot * phi)) - rot * hat(&phi) * rot.transpose()).abs().max() < 1e-10);
            assert!(
                (exp_so3(&phi) * rot - rot * exp_so3(&(rot.transpose() * phi))).abs().max()
                    < 1e-10
            );
        }
    }

    #[test]
    fn small_disturbances_compose_additively() {
        let d1 = Vec3::new(0.3, -0.1, 0.2);
        let d2 = Vec3::new(-0.1, 0.25, 0.05);
        let err = |s: f64| {
            (log_so3(&(exp_so3(&(d1 * s)) * exp_so3(&(d2 * s)))) - (d1 + d2) * s).norm()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!(ratio > 3.5 && ratio < 4.5, "{ratio}");
    }

    #[test]
    fn quaternion_rotation_conversions() {
        assert_eq!(Quat::identity().to_rotation(), Mat3::identity());
        let h = 0.5f64.sqrt();
        let qz = Quat::new(h, 0.0, 0.0, h);
        assert!((qz.to_rotation() - exp_so3(&Vec3::new(0.0, 0.0, PI / 2.0))).abs().max() < 1e-12);

        let mut r = rng();
        for _ in 0..100 {
            let q = rand_quat(&mut r);
            let neg = Quat::from_parts_unchecked(-q.w, -q.v);
            assert_eq!(q.to_rotation(), neg.to_rotation());
        }
        for _ in 0..1000 {
            let m = exp_so3(&rand_vec(&mut r, 3.0));
            let q = Quat::from_rotation(&m);
            assert!((q.norm() - 1.0).abs() < 1e-12);
            assert!((q.to_rotation() - m).abs().max() < 1e-9);
        }
    }

    #[test]
    fn rotation_by_pi_uses_largest_diagonal() {
        let rx = exp_so3(&Vec3::new(PI, 0.0, 0.0));
        let q = Quat::from_rotation(&rx).canonical();
        assert!((q.coords() - Vector4::new(0.0, 1.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((q.to_rotation() - rx).abs().max() < 1e-9);
    }

    #[test]
    fn rotation_vector_to_quaternion() {
        assert_eq!(Quat::from_rotation_vector(&Vec3::zeros()), Quat::identity());
        let q = Quat::from_rotation_vector(&Vec3::new(0.0, 0.0, PI / 2.0));
        let expect = Vector4::new((PI / 4.0).cos(), 0.0, 0.0, (PI / 4.0).sin());
        assert!((q.coords() - expect).norm() < 1e-15);

        let mut r = rng();
        for _ in 0..1000 {
            let phi = rand_vec(&mut r, 1.8);
            let a = Quat::from_rotation_vector(&phi).canonical();
            let b = Quat::from_rotation(&exp_so3(&phi)).canonical();
            assert!((a.coords() - b.coords()).norm() < 1e-10);
            assert!((a.to_rotation_vector() - phi).norm() < 1e-10);
        }
    }

    #[test]
    fn product_is_a_homomorphism() {
        let mut r = rng();
        for _ in 0..100 {
            let q = rand_quat(&mut r);
            let p = rand_quat(&mut r);
            let qp = q * p;
            assert!((qp.to_rotation() - q.to_rotation() * p.to_rotation()).abs().max() < 1e-10);
            assert!((q.left_matrix() * p.coords() - p.right_matrix() * q.coords()).norm() < 1e-15);
            assert!((qp.coords() - q.left_matrix() * p.coords()).norm() < 1e-15);
            assert!((q * Quat::identity()).coords() == q.coords());
            let id = q * q.inverse();
            assert!((id.coords() - Quat::identity().coords()).norm() < 1e-15);
        }
        assert_eq!(Quat::identity().left_matrix(), Matrix4::identity());
        assert_eq!(Quat::identity().right_matrix(), Matrix4::identity());
    }

    #[test]
    fn bottom_right_block() {
        let m = Matrix4::from_fn(|i, j| (4 * i + j) as f64);
        assert_eq!(brc3(&m), Mat3::new(5.0, 6.0, 7.0, 9.0, 10.0, 11.0, 13.0, 14.0, 15.0));
    }

    #[test]
    fn retraction_forms() {
        let mut r = rng();
        let q = rand_quat(&mut r);
        assert!((q.retract(&Vec3::zeros()).coords() - q.coords()).norm() < 1e-15);
        let rz = Quat::identity().retract(&Vec3::new(0.0, 0.0, PI / 2.0));
        let expect = Quat::from_rotation_vector(&Vec3::new(0.0, 0.0, PI / 2.0));
        assert!((rz.coords() - expect.coords()).norm() < 1e-15);
        for _ in 0..100 {
            let d = rand_vec(&mut r, 1.0).normalize() * 1e-4;
            let exact = q.retract(&d);
            let approx = q.retract_approx(&d);
            assert!((exact.coords() - approx.coords()).norm() < 1e-9);
        }
    }

    #[test]
    fn omega_matches_quaternion_kinematics() {
        assert_eq!(omega_matrix(&Vec3::zeros()), Matrix4::zeros());
        let mut r = rng();
        for _ in 0..100 {
            let q = rand_quat(&mut r);
            let w = rand_vec(&mut r, 2.0);
            let m = omega_matrix(&w);
            assert_eq!(m, -m.transpose());
            let lhs = m * q.coords() * 0.5;
            let rhs = (q * Quat::from_parts_unchecked(0.0, w)).coords() * 0.5;
            assert!((lhs - rhs).norm() < 1e-14);
        }
    }

    #[test]
    fn rigid_transform_group_laws() {
        let mut r = rng();
        for _ in 0..50 {
            let a = RigidTransform::new(exp_so3(&rand_vec(&mut r, 2.0)), rand_vec(&mut r, 5.0));
            let b = RigidTransform::new(exp_so3(&rand_vec(&mut r, 2.0)), rand_vec(&mut r, 5.0));
            let c = RigidTransform::new(exp_so3(&rand_vec(&mut r, 2.0)), rand_vec(&mut r, 5.0));
            let lhs = a.compose(&b).compose(&c).to_homogeneous();
            let rhs = a.compose(&b.compose(&c)).to_homogeneous();
            assert!((lhs - rhs).abs().max() < 1e-9);
            let id = a.compose(&a.inverse()).to_homogeneous();
            assert!((id - Matrix4::identity()).abs().max() < 1e-9);
            assert!((a.to_homogeneous() * b.to_homogeneous() - a.compose(&b).to_homogeneous())
                .abs()
                .max()
                < 1e-9);
            let p = rand_vec(&mut r, 3.0);
            assert!((a.inverse().transform_point(&a.transform_point(&p)) - p).norm() < 1e-9);
        }
    }
}
