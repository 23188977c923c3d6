//! SO(3) / SE(3) group operations with closed-form exponential and logarithm maps.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] maps world coordinates into sensor coordinates, `x_s = R x_w + t`.
//!   The relative pose between two frames is therefore `T_ab = T_b * T_a^-1`, which
//!   carries frame-`a` coordinates into frame `b`.
//! * Tangent vectors are packed translation first, `xi = (rho, phi)`.
//! * Increments are applied by left multiplication, `retract(T, d) = Exp(d) * T`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;
pub type Vec6 = Vector6<f64>;

/// Below this rotation angle the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;
// The Jacobian coefficients cancel badly well above SMALL_ANGLE, so they switch to
// their series earlier.
const SERIES_ANGLE: f64 = 1e-2;
/// Logarithms are only defined for angles strictly below `PI - NEAR_PI_MARGIN`.
pub const NEAR_PI_MARGIN: f64 = 1e-6;
/// Rotations are re-projected onto SO(3) after this many chained compositions.
const REORTHONORMALIZE_EVERY: u32 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("rotation angle {0} is too close to pi for a unique logarithm")]
    AngleNearPi(f64),
}

/// Skew-symmetric matrix such that `hat(v) * w == v.cross(w)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] (reads the skew part of `m`).
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Coefficients `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)` with Taylor fallbacks.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let s = theta.sin();
        let t2 = theta * theta;
        let half = (0.5 * theta).sin();
        (s / theta, 2.0 * half * half / t2, (theta - s) / (t2 * theta))
    }
}

/// A 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto the nearest rotation (polar decomposition).
    pub fn from_matrix_orthonormalized(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    pub fn exp(phi: &Vec3) -> Self {
        let theta = phi.norm();
        let (a, b, _) = rodrigues_coefficients(theta);
        let k = hat(phi);
        Rotation(Mat3::identity() + k * a + k * k * b)
    }

    /// Rotation vector of this rotation, on the principal branch.
    pub fn log(&self) -> Result<Vec3, LieError> {
        let r = &self.0;
        let skew = vee(&(r - r.transpose())) * 0.5;
        let sin_theta = skew.norm();
        let cos_theta = 0.5 * (r.trace() - 1.0);
        let theta = sin_theta.atan2(cos_theta);
        if theta >= std::f64::consts::PI - NEAR_PI_MARGIN {
            return Err(LieError::AngleNearPi(theta));
        }
        let scale = if theta < SMALL_ANGLE {
            1.0 + theta * theta / 6.0
        } else {
            theta / sin_theta
        };
        Ok(skew * scale)
    }

    /// Rotation angle in `[0, pi]`, via the clamped trace formula.
    pub fn angle(&self) -> f64 {
        let c = (0.5 * (self.0.trace() - 1.0)).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Left Jacobian of SO(3) (also the `V` matrix of the SE(3) exponential).
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let (_, b, c) = rodrigues_coefficients(theta);
    let k = hat(phi);
    Mat3::identity() + k * b + k * k * c
}

pub fn so3_left_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = hat(phi);
    let coeff = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta)
    };
    Mat3::identity() - k * 0.5 + k * k * coeff
}

/// Tangent vector of SE(3), translation part first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vec3,
    pub phi: Vec3,
}

impl Twist {
    pub fn new(rho: Vec3, phi: Vec3) -> Self {
        Twist { rho, phi }
    }

    pub fn zero() -> Self {
        Twist::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Twist::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Twist::from_slice(v.as_slice())
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    /// Small adjoint `ad(xi)` with `ad(xi) * eta` the Lie bracket `[xi, eta]`.
    pub fn ad(&self) -> Mat6 {
        let mut m = Mat6::zeros();
        let hp = hat(&self.phi);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hp);
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&self.rho));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&hp);
        m
    }
}

/// Coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vec3, phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 362880.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let prp = p * r * p;
    r * 0.5 + (p * r + r * p + prp) * c1 + (p * p * r + r * p * p - prp * 3.0) * c2
        + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3): `Exp(xi + d) ~= Exp(J_l(xi) d) * Exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Mat6 {
    let j = so3_left_jacobian(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Mat6 {
    let j_inv = so3_left_jacobian_inv(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-j_inv * q * j_inv));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    m
}

/// Rigid transform mapping world coordinates into sensor coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    rotation: Rotation,
    translation: Vec3,
    // Number of compositions since the rotation was last re-orthonormalized.
    chain: u32,
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
            chain: 0,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn exp(xi: &Twist) -> Self {
        Pose::new(
            Rotation::exp(&xi.phi),
            so3_left_jacobian(&xi.phi) * xi.rho,
        )
    }

    pub fn log(&self) -> Result<Twist, LieError> {
        let phi = self.rotation.log()?;
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        Ok(Twist::new(rho, phi))
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = self.rotation * other.rotation;
        let translation = &self.rotation * other.translation + self.translation;
        let chain = self.chain.max(other.chain) + 1;
        if chain >= REORTHONORMALIZE_EVERY {
            Pose::new(
                Rotation::from_matrix_orthonormalized(rotation.matrix()),
                translation,
            )
        } else {
            Pose {
                rotation,
                translation,
                chain,
            }
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            translation: -(&rt * self.translation),
            rotation: rt,
            chain: self.chain,
        }
    }

    pub fn act_point(&self, p: &Vec3) -> Vec3 {
        &self.rotation * *p + self.translation
    }

    pub fn act_array(&self, p: &[f64; 3]) -> [f64; 3] {
        let q = self.act_point(&Vec3::new(p[0], p[1], p[2]));
        [q.x, q.y, q.z]
    }

    /// Adjoint in `(rho, phi)` ordering: `[[R, hat(t) R], [0, R]]`.
    pub fn adjoint(&self) -> Mat6 {
        let r = self.rotation.matrix();
        let mut m = Mat6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        m
    }

    /// Left retraction `Exp(dxi) * self`.
    pub fn retract(&self, dxi: &Twist) -> Pose {
        Pose::exp(dxi).compose(self)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        Pose::new(
            Rotation::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into_owned()),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Pose {
        let r = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Pose::new(
            Rotation::from_matrix_unchecked(r),
            Vec3::new(v[3], v[7], v[11]),
        )
    }

    /// Norm of the logarithm of `self^-1 * other`.
    pub fn distance(&self, other: &Pose) -> Result<f64, LieError> {
        Ok(self.inverse().compose(other).log()?.norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let rho = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        Twist::new(rho, axis * rng.random_range(0.0..max_angle))
    }

    fn cross_oracle(v: &Vec3, w: &Vec3) -> Vec3 {
        Vec3::new(
            v[1] * w[2] - v[2] * w[1],
            v[2] * w[0] - v[0] * w[2],
            v[0] * w[1] - v[1] * w[0],
        )
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat(&Vec3::zeros()), Mat3::zeros());
        let expected = Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_eq!(hat(&Vec3::new(1.0, 0.0, 0.0)), expected);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = random_twist(&mut rng, 3.0).rho;
            let w = random_twist(&mut rng, 3.0).rho;
            let got = hat(&v) * w;
            assert!(max_abs_diff(got.as_slice(), cross_oracle(&v, &w).as_slice()) < 1e-14);
            assert_eq!(hat(&v).transpose(), -hat(&v));
        }
    }

    #[test]
    fn exp_examples() {
        assert_eq!(Pose::exp(&Twist::zero()), Pose::identity());

        let quarter = Pose::exp(&Twist::new(
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
        ));
        let rz = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(max_abs_diff(quarter.rotation().matrix().as_slice(), rz.as_slice()) < 1e-15);
        assert_eq!(*quarter.translation(), Vec3::zeros());

        let shift = Pose::exp(&Twist::new(Vec3::new(1.0, 0.0, 0.0), Vec3::zeros()));
        assert_eq!(*shift.rotation(), Rotation::identity());
        assert_eq!(*shift.translation(), Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn log_examples() {
        let zero = Pose::identity().log().unwrap();
        assert_eq!(zero.to_vector(), Vec6::zeros());

        let xi = Twist::from_slice(&[0.1, -0.2, 0.3, 0.05, 0.02, -0.01]);
        let back = Pose::exp(&xi).log().unwrap();
        assert!((back.to_vector() - xi.to_vector()).norm() < 1e-12);

        let t = Pose::from_translation(Vec3::new(2.0, 3.0, 4.0)).log().unwrap();
        assert_eq!(t.rho, Vec3::new(2.0, 3.0, 4.0));
        assert_eq!(t.phi, Vec3::zeros());
    }

    #[test]
    fn log_near_pi_is_rejected() {
        let t = Pose::exp(&Twist::new(
            Vec3::zeros(),
            Vec3::new(0.0, std::f64::consts::PI - 1e-8, 0.0),
        ));
        assert!(matches!(t.log(), Err(LieError::AngleNearPi(_))));
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Pose::exp(&random_twist(&mut rng, 3.0));
        let b = Pose::exp(&random_twist(&mut rng, 3.0));
        let c = Pose::exp(&random_twist(&mut rng, 3.0));
        let chained = a.compose(&b).compose(&c).to_matrix();
        let oracle = a.to_matrix() * b.to_matrix() * c.to_matrix();
        assert!(max_abs_diff(chained.as_slice(), oracle.as_slice()) < 1e-12);
        let assoc = a.compose(&b.compose(&c)).to_matrix();
        assert!(max_abs_diff(chained.as_slice(), assoc.as_slice()) < 1e-12);
        assert!(a.inverse().compose(&a).log().unwrap().norm() < 1e-12);
    }

    #[test]
    fn adjoint_examples() {
        assert_eq!(Pose::identity().adjoint(), Mat6::identity());

        let t = Vec3::new(0.3, -1.0, 2.0);
        let adj = Pose::from_translation(t).adjoint();
        let mut expected = Mat6::identity();
        expected.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&t));
        assert_eq!(adj, expected);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = Pose::exp(&random_twist(&mut rng, 3.0));
            let xi = random_twist(&mut rng, 1.0);
            let lhs = Pose::exp(&Twist::from_vector(&(t.adjoint() * xi.to_vector()))).compose(&t);
            let rhs = t.compose(&Pose::exp(&xi));
            assert!(lhs.distance(&rhs).unwrap() < 1e-9);
        }
    }

    #[test]
    fn retract_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Pose::exp(&random_twist(&mut rng, 2.0));
        assert!(t.retract(&Twist::zero()).distance(&t).unwrap() < 1e-15);
        let xi = random_twist(&mut rng, 0.3);
        assert_eq!(Pose::identity().retract(&xi), Pose::exp(&xi));
        let back = t.retract(&xi).compose(&t.inverse()).log().unwrap();
        assert!((back.to_vector() - xi.to_vector()).norm() < 1e-10);
    }

    #[test]
    fn small_angle_switch_is_continuous() {
        let axis = Vec3::new(0.3, -0.5, 0.8).normalize();
        let rho = Vec3::new(0.4, 0.1, -0.7);
        let below = Pose::exp(&Twist::new(rho, axis * (SMALL_ANGLE * (1.0 - 1e-9))));
        let above = Pose::exp(&Twist::new(rho, axis * (SMALL_ANGLE * (1.0 + 1e-9))));
        let diff = max_abs_diff(below.to_matrix().as_slice(), above.to_matrix().as_slice());
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let xi = random_twist(&mut rng, 2.5);
            let jl = se3_left_jacobian(&xi);
            let base = Pose::exp(&xi);
            let h = 1e-6;
            for k in 0..6 {
                let mut plus = xi.to_vector();
                let mut minus = xi.to_vector();
                plus[k] += h;
                minus[k] -= h;
                let lp = Pose::exp(&Twist::from_vector(&plus))
                    .compose(&base.inverse())
                    .log()
                    .unwrap()
                    .to_vector();
                let lm = Pose::exp(&Twist::from_vector(&minus))
                    .compose(&base.inverse())
                    .log()
                    .unwrap()
                    .to_vector();
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - jl.column(k)).norm() < 1e-7, "column {k}");
            }
            let prod = jl * se3_left_jacobian_inv(&xi);
            assert!((prod - Mat6::identity()).norm() < 1e-10);
        }
    }

    #[test]
    fn orthonormalization_keeps_chains_on_the_manifold() {
        let step = Pose::exp(&Twist::from_slice(&[0.01, 0.0, 0.0, 0.001, 0.002, 0.003]));
        let mut acc = Pose::identity();
        for _ in 0..1000 {
            acc = acc.compose(&step);
        }
        let r = acc.rotation().matrix();
        assert!((r * r.transpose() - Mat3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }
}
