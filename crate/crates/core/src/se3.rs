//! Rigid-body transform algebra on SO(3) and SE(3).
//!
//! Rotations are unit quaternions stored as `(x, y, z, w)` and kept in the
//! canonical hemisphere `w >= 0`, so a pose has exactly one serialized form.
//! Tangent vectors ([`Twist`]) are ordered rotation first, translation second.
//!
//! The exponential is the full SE(3) map with the coupled `V` matrix; the
//! logarithm is its inverse on rotation angles in `[0, pi]`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, Vector3, Vector6};

/// Below this rotation angle `exp_map` switches to its Taylor branch.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Below this angle the Jacobian coefficients use their series expansions.
const SERIES_ANGLE: f64 = 1e-2;

/// A squared norm this close to one is treated as already normalized, which
/// keeps normalization idempotent (bit-stable file round trips).
const NORM_SQ_EPS: f64 = 1e-15;

/// Skew-symmetric cross-product matrix of `v`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit quaternion rotation in canonical form (`w >= 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    q: Quaternion<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: Quaternion::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    /// Builds a rotation from raw quaternion components, normalizing and
    /// canonicalizing the sign. Returns `None` for a zero or non-finite input.
    pub fn try_from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Option<Self> {
        let n2 = x * x + y * y + z * z + w * w;
        if !n2.is_finite() || n2 <= f64::MIN_POSITIVE {
            return None;
        }
        let q = if x == 0.0 && y == 0.0 && z == 0.0 {
            Quaternion::identity()
        } else if (n2 - 1.0).abs() > NORM_SQ_EPS {
            let n = n2.sqrt();
            Quaternion::new(w / n, x / n, y / n, z / n)
        } else {
            Quaternion::new(w, x, y, z)
        };
        Some(Self { q: canonical(q) })
    }

    /// Panics on a zero or non-finite quaternion; use [`Rotation::try_from_xyzw`]
    /// for untrusted input.
    pub fn from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self::try_from_xyzw(x, y, z, w).expect("quaternion must be finite and nonzero")
    }

    /// SO(3) exponential of a rotation vector (axis times angle, radians).
    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta = phi.norm();
        if theta < SMALL_ANGLE {
            let v = phi * 0.5;
            Self::from_xyzw(v.x, v.y, v.z, 1.0 - theta * theta / 8.0)
        } else {
            let half = 0.5 * theta;
            let v = phi * (half.sin() / theta);
            Self::from_xyzw(v.x, v.y, v.z, half.cos())
        }
    }

    /// SO(3) logarithm; the returned angle lies in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        let v = self.q.imag();
        let w = self.q.w;
        let s = v.norm();
        if s < SMALL_ANGLE {
            // w is ~1 here, so the ratio is well conditioned
            let scale = 2.0 / w * (1.0 - s * s / (3.0 * w * w));
            v * scale
        } else {
            let theta = 2.0 * s.atan2(w);
            v * (theta / s)
        }
    }

    pub fn xyzw(&self) -> [f64; 4] {
        [self.q.i, self.q.j, self.q.k, self.q.w]
    }

    pub fn quaternion(&self) -> Quaternion<f64> {
        self.q
    }

    pub fn inverse(&self) -> Self {
        Self {
            q: canonical(self.q.conjugate()),
        }
    }

    pub fn compose(&self, other: &Self) -> Self {
        // Hamilton product summed so that `q* q` cancels exactly.
        let (aw, ax, ay, az) = (self.q.w, self.q.i, self.q.j, self.q.k);
        let (bw, bx, by, bz) = (other.q.w, other.q.i, other.q.j, other.q.k);
        Self::from_xyzw(
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by + ay * bw + az * bx - ax * bz,
            aw * bz + az * bw + ax * by - ay * bx,
            aw * bw - ax * bx - ay * by - az * bz,
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix() * v
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let (x, y, z, w) = (self.q.i, self.q.j, self.q.k, self.q.w);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Matrix3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Rotation matrix to quaternion (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (x, y, z, w);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::from_xyzw(x, y, z, w)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical(q: Quaternion<f64>) -> Quaternion<f64> {
    let flip = if q.w != 0.0 {
        q.w < 0.0
    } else {
        // tie at w = 0: first nonzero imaginary component must be positive
        [q.i, q.j, q.k]
            .into_iter()
            .find(|c| *c != 0.0)
            .is_some_and(|c| c < 0.0)
    };
    if flip {
        -q
    } else {
        q
    }
}

/// Element of the SE(3) Lie algebra, rotation part first.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Twist {
    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rot: Vector3::new(v[0], v[1], v[2]),
            trans: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rot.x,
            self.rot.y,
            self.rot.z,
            self.trans.x,
            self.trans.y,
            self.trans.z,
        )
    }

    /// 4x4 matrix representation in the Lie algebra.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&self.rot));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }
}

/// Rigid transform: `p_parent = rotation * p_child + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -inv.rotate(&self.translation),
        }
    }

    /// Relative pose `inverse(self) * other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// SE(3) exponential with the coupled translation `V * rho`.
    pub fn exp(xi: &Twist) -> Pose {
        let rotation = Rotation::exp(&xi.rot);
        Pose {
            rotation,
            translation: left_jacobian_so3(&xi.rot) * xi.trans,
        }
    }

    /// SE(3) logarithm; rotation norm in `[0, pi]`.
    pub fn log(&self) -> Twist {
        let phi = self.rotation.log();
        Twist {
            rot: phi,
            trans: left_jacobian_so3_inv(&phi) * self.translation,
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Pose {
            rotation: Rotation::from_matrix(&r),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Adjoint acting on twists ordered (rotation, translation).
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Right-multiplicative retraction `self * exp(delta)`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        self.compose(&Pose::exp(delta))
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let [x, y, z, w] = self.rotation.xyzw();
        write!(
            f,
            "Pose(t: [{:.4}, {:.4}, {:.4}], q: [{:.4}, {:.4}, {:.4}, {:.4}])",
            t.x, t.y, t.z, x, y, z, w
        )
    }
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
pub fn left_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0)
    } else {
        let s = (0.5 * theta).sin();
        (
            2.0 * s * s / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`left_jacobian_so3`].
pub fn left_jacobian_so3_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let k = hat(phi);
    Matrix3::identity() - k * 0.5 + k * k * inv_jacobian_coeff(phi.norm())
}

// (1 - (theta/2) cot(theta/2)) / theta^2, finite on [0, pi]
fn inv_jacobian_coeff(theta: f64) -> f64 {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    }
}

// Coupling block of the SE(3) left Jacobian.
fn q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Inverse of the SE(3) right Jacobian, twist ordering (rotation, translation).
///
/// Maps a right perturbation `X * exp(eps)` to the first-order change of
/// `log(X)`: `log(X exp(eps)) ~ log(X) + Jr^-1(log X) eps`.
pub fn right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let neg_phi = -xi.rot;
    let neg_rho = -xi.trans;
    let j_inv = left_jacobian_so3_inv(&neg_phi);
    let q = q_block(&neg_rho, &neg_phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-(j_inv * q * j_inv)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        Twist::new(
            axis * angle,
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::exp(&random_twist(rng, PI))
    }

    fn pose_dist(a: &Pose, b: &Pose) -> f64 {
        a.between(b).log().to_vector().norm()
    }

    // Truncated power series of a 4x4 matrix; independent of the closed forms.
    fn expm_series(m: &Matrix4<f64>) -> Matrix4<f64> {
        let mut sum = Matrix4::identity();
        let mut term = Matrix4::identity();
        for k in 1..60 {
            term = term * m / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn zero_twist_is_identity() {
        let p = Pose::exp(&Twist::zero());
        assert_eq!(p.rotation.xyzw(), [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.translation, Vector3::zeros());
        assert_eq!(Pose::identity().log().to_vector(), Vector6::zeros());
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = Pose::exp(&Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        let [x, y, z, w] = p.rotation.xyzw();
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(z, FRAC_PI_4.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(w, FRAC_PI_4.cos(), epsilon = 1e-15);
        assert_eq!(p.translation, Vector3::zeros());
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, PI - 1e-3);
            let back = Pose::exp(&xi).log();
            assert!((back.to_vector() - xi.to_vector()).norm() <= 1e-10);
        }
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let q = Pose::exp(&p.log());
            assert!(pose_dist(&p, &q) <= 1e-10);
            assert!((p.translation - q.translation).norm() <= 1e-10);
        }
    }

    #[test]
    fn exp_matches_matrix_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let xi = random_twist(&mut rng, PI - 1e-3);
            let m = expm_series(&xi.matrix());
            assert!((Pose::exp(&xi).matrix() - m).abs().max() <= 1e-12);
            let recovered = Pose::from_matrix(&m).log();
            assert!((recovered.to_vector() - xi.to_vector()).norm() <= 1e-9);
        }
    }

    #[test]
    fn rotation_by_pi_has_valid_axis() {
        let xi = Twist::new(Vector3::new(PI, 0.0, 0.0), Vector3::new(0.1, 0.2, 0.3));
        let back = Pose::exp(&xi).log();
        assert_abs_diff_eq!(back.rot.norm(), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(back.rot.x.abs(), PI, epsilon = 1e-12);
        let again = Pose::exp(&back);
        assert!((again.matrix() - Pose::exp(&xi).matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn compose_inverse_between_match_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let ab = a.compose(&b).matrix();
            assert!((ab - a.matrix() * b.matrix()).abs().max() <= 1e-12);
            let inv = a.matrix().try_inverse().unwrap();
            assert!((a.inverse().matrix() - inv).abs().max() <= 1e-12);
            let rel = a.between(&b).matrix();
            assert!((rel - a.inverse().compose(&b).matrix()).abs().max() <= 1e-15);
        }
    }

    #[test]
    fn group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = Pose::identity();
        for _ in 0..500 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            assert!((lhs.matrix() - rhs.matrix()).abs().max() <= 1e-12);
            assert!(pose_dist(&id.compose(&a), &a) <= 1e-15);
            assert!(a.inverse().compose(&a).log().to_vector().norm() <= 1e-10);
            assert!(a.compose(&a.inverse()).log().to_vector().norm() <= 1e-10);
            assert!(pose_dist(&a.inverse().inverse(), &a) <= 1e-12);
            assert!(a.between(&a).log().to_vector().norm() <= 1e-10);
            assert!(pose_dist(&id.between(&a), &a) <= 1e-12);
        }
        assert_eq!(id.inverse(), id);
    }

    #[test]
    fn canonical_sign() {
        let r = Rotation::from_xyzw(0.0, 0.0, 0.6, -0.8);
        assert_eq!(r.xyzw(), [0.0, 0.0, -0.6, 0.8]);
        let tie = Rotation::from_xyzw(0.0, -1.0, 0.0, 0.0);
        assert_eq!(tie.xyzw(), [0.0, 1.0, 0.0, 0.0]);
        assert!(Rotation::try_from_xyzw(0.0, 0.0, 0.0, 0.0).is_none());
        assert!(Rotation::try_from_xyzw(f64::NAN, 0.0, 0.0, 1.0).is_none());
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let r = random_pose(&mut rng).rotation;
            let [x, y, z, w] = r.xyzw();
            assert_eq!(Rotation::from_xyzw(x, y, z, w).xyzw(), r.xyzw());
        }
    }

    #[test]
    fn norm_preserved_over_long_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let steps: Vec<Rotation> = (0..64).map(|_| random_pose(&mut rng).rotation).collect();
        let mut acc = Rotation::identity();
        for i in 0..1_000_000 {
            acc = acc.compose(&steps[i % steps.len()]);
        }
        let n = acc.quaternion().norm();
        assert!((n - 1.0).abs() <= 1e-9);
        assert!(acc.quaternion().w >= 0.0);
    }

    #[test]
    fn small_angle_branch_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let axis = random_twist(&mut rng, 1.0).rot.normalize();
            let rho = Vector3::new(0.3, -0.7, 0.5);
            let phi = axis * 1e-6;
            let general = Pose::exp(&Twist::new(phi, rho));
            // Taylor branch evaluated explicitly at the same point
            let t2 = 1e-12;
            let k = hat(&phi);
            let v = Matrix3::identity() + k * (0.5 - t2 / 24.0) + k * k * (1.0 / 6.0 - t2 / 120.0);
            let half = phi * 0.5;
            let q = Rotation::from_xyzw(half.x, half.y, half.z, 1.0 - t2 / 8.0);
            assert!((general.translation - v * rho).abs().max() <= 1e-12);
            let a = general.rotation.xyzw();
            let b = q.xyzw();
            for i in 0..4 {
                assert!((a[i] - b[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn log_norm_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let p = Pose::new(
                Rotation::from_xyzw(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                Vector3::zeros(),
            );
            let n = p.log().rot.norm();
            assert!((0.0..=PI + 1e-12).contains(&n));
        }
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-6;
        for _ in 0..200 {
            let xi = random_twist(&mut rng, 2.5);
            let x = Pose::exp(&xi);
            let analytic = right_jacobian_inv(&xi);
            let mut numeric = Matrix6::zeros();
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                let plus = x.retract(&Twist::from_vector(&d)).log().to_vector();
                let minus = x.retract(&Twist::from_vector(&-d)).log().to_vector();
                numeric.set_column(i, &((plus - minus) / (2.0 * h)));
            }
            let err = (analytic - numeric).norm() / numeric.norm().max(1.0);
            assert!(err <= 1e-7, "relative error {err}");
        }
    }

    #[test]
    fn adjoint_conjugates_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            let xi = random_twist(&mut rng, 1.0);
            let lhs = t.compose(&Pose::exp(&xi)).compose(&t.inverse());
            let rhs = Pose::exp(&Twist::from_vector(&(t.adjoint() * xi.to_vector())));
            assert!((lhs.matrix() - rhs.matrix()).abs().max() <= 1e-12);
        }
    }
}
