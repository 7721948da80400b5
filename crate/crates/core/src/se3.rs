//! Rigid transforms on SE(3) and their tangent space se(3).
//!
//! Poses are stored as a rotation matrix plus a translation vector; the 4×4
//! homogeneous form only appears at serialization boundaries (16 floats,
//! row-major). Tangent vectors are ordered `[u_x, u_y, u_z, ω_x, ω_y, ω_z]`,
//! translation first.
//!
//! # Numerics
//!
//! Exp and Log switch to second-order Taylor expansions of the trigonometric
//! ratios below `1e-6` rad. The half-angle form `2 sin²(θ/2)` replaces
//! `1 − cos θ` everywhere to avoid cancellation. Above roughly 135° the
//! rotation axis is read off the symmetric part of `R`, which stays well
//! conditioned up to π; the antisymmetric part only fixes the sign.
//!
//! [`log_map`] refuses rotations within `1e-6` of π because the tangent
//! vector is not unique there. [`log_map_fallback`] always answers, picking
//! the axis sign deterministically.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

const SMALL_ANGLE: f64 = 1e-6;
const PI_BAND: f64 = 1e-6;
const ORTHO_DRIFT: f64 = 1e-7;
const ORTHO_REJECT: f64 = 1e-3;
/// cos(θ) below which the axis is recovered from the symmetric part.
const SYMMETRIC_AXIS_COS: f64 = -0.7;

/// Skew-symmetric (cross-product) matrix of `v`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee_antisymmetric(r: &Mat3) -> Vec3 {
    Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5
}

/// Element of se(3): `u` is the translational part, `omega` the axis-angle part.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Twist {
    pub u: Vec3,
    pub omega: Vec3,
}

impl Twist {
    pub fn new(u: Vec3, omega: Vec3) -> Self {
        Self { u, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            u: Vec3::new(a[0], a[1], a[2]),
            omega: Vec3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.u.x, self.u.y, self.u.z, self.omega.x, self.omega.y, self.omega.z]
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::from_array([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::from_column_slice(&self.to_array())
    }

    pub fn norm(&self) -> f64 {
        (self.u.norm_squared() + self.omega.norm_squared()).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Twist) -> f64 {
        let a = self.to_array();
        let b = other.to_array();
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.u + rhs.u, self.omega + rhs.omega)
    }
}

impl Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist::new(self.u - rhs.u, self.omega - rhs.omega)
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.u, -self.omega)
    }
}

impl Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist::new(self.u * s, self.omega * s)
    }
}

/// A rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct SE3Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl fmt::Debug for SE3Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = so3_log_fallback(&self.rotation);
        write!(
            f,
            "SE3Pose(t=[{:.6}, {:.6}, {:.6}], ω=[{:.6}, {:.6}, {:.6}])",
            self.translation.x, self.translation.y, self.translation.z, w.x, w.y, w.z
        )
    }
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates `rotation`, re-orthonormalizing it when the drift exceeds 1e-7.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entries".into()));
        }
        let drift = orthonormality_error(&rotation);
        let rotation = if drift > ORTHO_REJECT {
            return Err(Error::InvalidRotation(format!("orthonormality error {drift:e}")));
        } else if drift > ORTHO_DRIFT {
            nearest_rotation(&rotation)?
        } else {
            rotation
        };
        if rotation.determinant() < 0.0 {
            return Err(Error::InvalidRotation("determinant is negative".into()));
        }
        Ok(Self { rotation, translation })
    }

    /// Builds a pose from parts already known to be a proper rotation
    /// (products of rotations, Gram–Schmidt output).
    pub(crate) fn from_parts_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Mat3) -> Result<Self> {
        Self::new(rotation, Vec3::zeros())
    }

    pub fn rot_x(angle: f64) -> Self {
        exp_map(&Twist::new(Vec3::zeros(), Vec3::new(angle, 0.0, 0.0)))
    }

    pub fn rot_y(angle: f64) -> Self {
        exp_map(&Twist::new(Vec3::zeros(), Vec3::new(0.0, angle, 0.0)))
    }

    pub fn rot_z(angle: f64) -> Self {
        exp_map(&Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, angle)))
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn with_translation(&self, translation: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    /// `self · other` in homogeneous-matrix semantics.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }

    /// Row-major homogeneous 4×4 matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::BadParameter(format!("pose needs 16 floats, got {}", m.len())));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::BadParameter("bottom row of a pose must be [0, 0, 0, 1]".into()));
        }
        let r = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(r, Vec3::new(m[3], m[7], m[11]))
    }

    /// Largest absolute entry difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &SE3Pose) -> f64 {
        let a = self.to_row_major();
        let b = other.to_row_major();
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

impl Mul for SE3Pose {
    type Output = SE3Pose;
    fn mul(self, rhs: SE3Pose) -> SE3Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a SE3Pose> for &'a SE3Pose {
    type Output = SE3Pose;
    fn mul(self, rhs: &'a SE3Pose) -> SE3Pose {
        self.compose(rhs)
    }
}

impl Serialize for SE3Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SE3Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let m = Vec::<f64>::deserialize(deserializer)?;
        SE3Pose::from_row_major(&m).map_err(D::Error::custom)
    }
}

fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).amax()
}

fn nearest_rotation(r: &Mat3) -> Result<Mat3> {
    let svd = r.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::InvalidRotation("SVD failed".into())),
    };
    let q = u * vt;
    if q.determinant() < 0.0 {
        return Err(Error::InvalidRotation("closest orthogonal matrix is a reflection".into()));
    }
    Ok(q)
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vec3) -> Mat3 {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let half = 0.5 * theta;
        let sinc_half = half.sin() / half;
        (theta.sin() / theta, 0.5 * sinc_half * sinc_half)
    };
    let w = skew(omega);
    Mat3::identity() + w * a + w * w * b
}

/// Rotation angle in `[0, π]`, well conditioned over the whole range.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let s = vee_antisymmetric(r).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Unit axis from the symmetric part `(R + Rᵀ)/2 − cos θ·I = (1 − cos θ) a aᵀ`.
fn axis_from_symmetric(r: &Mat3, cos_theta: f64, sin_axis: &Vec3) -> Vec3 {
    let b = (r + r.transpose()) * 0.5 - Mat3::identity() * cos_theta;
    let j = (0..3)
        .max_by(|&i, &k| b[(i, i)].partial_cmp(&b[(k, k)]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);
    let col = b.column(j).into_owned();
    let norm = col.norm();
    let axis = if norm > 0.0 { col / norm } else { Vec3::x() };
    // At exactly π the antisymmetric part vanishes and the column with the
    // largest diagonal fixes the sign; otherwise it follows sin(θ)·a.
    let d = axis.dot(sin_axis);
    if d.abs() > 1e-14 && d < 0.0 {
        -axis
    } else {
        axis
    }
}

fn so3_log_impl(r: &Mat3) -> (Vec3, f64) {
    let w = vee_antisymmetric(r);
    let s = w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    let omega = if theta < SMALL_ANGLE {
        w * (1.0 + theta * theta / 6.0)
    } else if c < SYMMETRIC_AXIS_COS {
        axis_from_symmetric(r, c, &w) * theta
    } else {
        w * (theta / s)
    };
    (omega, theta)
}

/// SO(3) logarithm; errors inside the π band.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    let (omega, theta) = so3_log_impl(r);
    if theta > std::f64::consts::PI - PI_BAND {
        return Err(Error::NearPiRotation { angle: theta });
    }
    Ok(omega)
}

/// SO(3) logarithm with the deterministic axis rule at π.
pub fn so3_log_fallback(r: &Mat3) -> Vec3 {
    so3_log_impl(r).0
}

/// Left Jacobian `V(ω)` with `t = V u` in Exp.
pub fn left_jacobian(omega: &Vec3) -> Mat3 {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        let half = 0.5 * theta;
        let sinc_half = half.sin() / half;
        (0.5 * sinc_half * sinc_half, (theta - theta.sin()) / (theta_sq * theta))
    };
    let w = skew(omega);
    Mat3::identity() + w * b + w * w * c
}

/// Closed-form inverse of [`left_jacobian`].
pub fn left_jacobian_inverse(omega: &Vec3) -> Mat3 {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        let half = 0.5 * theta;
        // θ sin θ / (2 (1 − cos θ)) = (θ/2) cot(θ/2)
        (1.0 - half * half.cos() / half.sin()) / theta_sq
    };
    let w = skew(omega);
    Mat3::identity() - w * 0.5 + w * w * d
}

pub fn exp_map(delta: &Twist) -> SE3Pose {
    SE3Pose {
        rotation: so3_exp(&delta.omega),
        translation: left_jacobian(&delta.omega) * delta.u,
    }
}

/// Principal logarithm. Fails with [`Error::NearPiRotation`] inside the π band.
pub fn log_map(pose: &SE3Pose) -> Result<Twist> {
    let omega = so3_log(&pose.rotation)?;
    Ok(Twist::new(left_jacobian_inverse(&omega) * pose.translation, omega))
}

/// Logarithm that never fails; at π the axis sign comes from the largest
/// diagonal element of the symmetric part.
pub fn log_map_fallback(pose: &SE3Pose) -> Twist {
    let omega = so3_log_fallback(&pose.rotation);
    Twist::new(left_jacobian_inverse(&omega) * pose.translation, omega)
}

/// `Ad_a = [[R, t̂R], [0, R]]` acting on `[u; ω]`.
pub fn adjoint(a: &SE3Pose) -> Mat6 {
    let r = a.rotation;
    let tr = skew(&a.translation) * r;
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m
}

/// Geodesic blend `Exp((1 − τ)·Log(to · from⁻¹)) · from`.
///
/// `tau = 1` returns `from`, `tau = 0` returns `to`.
pub fn interpolate(tau: f64, from: &SE3Pose, to: &SE3Pose) -> Result<SE3Pose> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::BadParameter(format!("interpolation parameter {tau} outside [0, 1]")));
    }
    let rel = log_map(&to.compose(&from.inverse()))?;
    Ok(exp_map(&(rel * (1.0 - tau))).compose(from))
}

/// `sqrt(‖Log(Rᵀ R̂)‖² + ‖t̂ − t‖²)`.
pub fn geodesic_distance(a: &SE3Pose, b: &SE3Pose) -> f64 {
    let angle = rotation_angle(&(a.rotation.transpose() * b.rotation));
    let dt = (b.translation - a.translation).norm_squared();
    (angle * angle + dt).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn rz(a: f64) -> SE3Pose {
        SE3Pose::rot_z(a)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_map(&Twist::zero()), SE3Pose::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = exp_map(&Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2)));
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation() - expected).amax() < 1e-15);
        assert_eq!(p.translation(), &Vec3::zeros());
    }

    #[test]
    fn exp_pure_translation() {
        let p = exp_map(&Twist::new(Vec3::new(1.0, 0.0, 0.0), Vec3::zeros()));
        assert_eq!(p.rotation(), &Mat3::identity());
        assert_eq!(p.translation(), &Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn log_identity_and_examples() {
        assert_eq!(log_map(&SE3Pose::identity()).unwrap(), Twist::zero());
        let d = Twist::from_array([0.3, -0.1, 0.2, 0.1, 0.2, 0.3]);
        assert!(log_map(&exp_map(&d)).unwrap().max_abs_diff(&d) < 1e-14);
        let w = log_map(&rz(FRAC_PI_2)).unwrap();
        assert!(w.max_abs_diff(&Twist::from_array([0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2])) < 1e-15);
    }

    #[test]
    fn log_rejects_half_turn() {
        let err = log_map(&rz(PI)).unwrap_err();
        assert!(matches!(err, Error::NearPiRotation { .. }));
        let w = log_map_fallback(&rz(PI));
        assert_abs_diff_eq!(w.omega.norm(), PI, epsilon = 1e-12);
        // largest-diagonal rule picks +z
        assert!(w.omega.z > 0.0);
        assert_eq!(log_map_fallback(&rz(PI)), w);
    }

    #[test]
    fn fallback_log_near_pi_keeps_sign() {
        let angle = PI - 1e-8;
        let axis = Vec3::new(1.0, -2.0, 0.5).normalize();
        let p = exp_map(&Twist::new(Vec3::new(0.1, 0.2, 0.3), axis * angle));
        let w = log_map_fallback(&p);
        assert!((w.omega - axis * angle).amax() < 1e-7);
    }

    #[test]
    fn compose_examples() {
        let b = exp_map(&Twist::from_array([0.4, 0.1, -0.3, 0.2, -0.5, 0.7]));
        assert_eq!(SE3Pose::identity().compose(&b), b);
        let inv = SE3Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)).inverse();
        assert_eq!(inv.translation(), &Vec3::new(-1.0, -2.0, -3.0));
        let half_turn = rz(FRAC_PI_2).compose(&rz(FRAC_PI_2));
        let expected = Mat3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((half_turn.rotation() - expected).amax() < 1e-15);
        assert!(b.compose(&b.inverse()).max_abs_diff(&SE3Pose::identity()) < 1e-12);
    }

    #[test]
    fn adjoint_examples() {
        assert_eq!(adjoint(&SE3Pose::identity()), Mat6::identity());
        let r = exp_map(&Twist::from_array([0.0, 0.0, 0.0, 0.3, -0.2, 0.9]));
        let ad = adjoint(&r);
        assert_eq!(ad.fixed_view::<3, 3>(0, 0).into_owned(), *r.rotation());
        assert_eq!(ad.fixed_view::<3, 3>(3, 3).into_owned(), *r.rotation());
        assert_eq!(ad.fixed_view::<3, 3>(0, 3).amax(), 0.0);
    }

    #[test]
    fn interpolate_examples() {
        let h0 = exp_map(&Twist::from_array([0.2, -0.4, 0.1, 0.5, 0.3, -0.2]));
        let id = SE3Pose::identity();
        assert_eq!(interpolate(1.0, &h0, &id).unwrap(), h0);
        assert!(interpolate(0.0, &h0, &id).unwrap().max_abs_diff(&id) < 1e-12);
        let mid = interpolate(0.5, &rz(FRAC_PI_2), &id).unwrap();
        assert!(mid.max_abs_diff(&rz(FRAC_PI_4)) < 1e-15);
        assert!(interpolate(1.5, &h0, &id).is_err());
    }

    #[test]
    fn geodesic_examples() {
        let a = exp_map(&Twist::from_array([0.2, -0.4, 0.1, 0.5, 0.3, -0.2]));
        assert_eq!(geodesic_distance(&a, &a), 0.0);
        let b = rz(FRAC_PI_2).with_translation(Vec3::new(3.0, 4.0, 0.0));
        // frozen from an independent evaluation of sqrt((π/2)² + 25)
        assert_abs_diff_eq!(geodesic_distance(&SE3Pose::identity(), &b), 5.240935136048942, epsilon = 1e-12);
        let c = SE3Pose::from_translation(Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(geodesic_distance(&SE3Pose::identity(), &c), 2.0);
    }

    #[test]
    fn row_major_roundtrip_and_validation() {
        let a = exp_map(&Twist::from_array([0.2, -0.4, 0.1, 0.5, 0.3, -0.2]));
        let m = a.to_row_major();
        assert_eq!(SE3Pose::from_row_major(&m).unwrap(), a);
        let mut bad = m;
        bad[15] = 2.0;
        assert!(SE3Pose::from_row_major(&bad).is_err());
        let reflect = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(SE3Pose::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn construction_reorthonormalizes_small_drift() {
        let mut r = *rz(0.3).rotation();
        r[(0, 0)] += 1e-5;
        let p = SE3Pose::new(r, Vec3::zeros()).unwrap();
        assert!(p.orthonormality_error() < 1e-12);
        assert!((p.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    fn twist_strategy(max_angle: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-2.0..2.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            0.0..max_angle,
        )
            .prop_filter_map("axis too short", |(u, w, angle)| {
                let axis = Vec3::from(w);
                let n = axis.norm();
                (n > 1e-3).then(|| Twist::new(Vec3::from(u), axis / n * angle))
            })
    }

    fn pose_strategy() -> impl Strategy<Value = SE3Pose> {
        twist_strategy(PI - 1e-3).prop_map(|t| exp_map(&t))
    }

    proptest! {
        #[test]
        fn exp_log_roundtrip(d in twist_strategy(PI - 1e-3)) {
            let back = log_map(&exp_map(&d)).unwrap();
            prop_assert!(back.max_abs_diff(&d) < 1e-9);
        }

        #[test]
        fn tiny_rotations_roundtrip(u in prop::array::uniform3(-1.0..1.0f64), w in prop::array::uniform3(-1e-6..1e-6f64)) {
            let d = Twist::new(Vec3::from(u), Vec3::from(w));
            prop_assert!(log_map(&exp_map(&d)).unwrap().max_abs_diff(&d) < 1e-12);
        }

        #[test]
        fn compose_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.max_abs_diff(&right) < 1e-12);
        }

        #[test]
        fn adjoint_moves_perturbation_across(a in pose_strategy(), d in twist_strategy(2.0)) {
            let lhs = a.compose(&exp_map(&d));
            let moved = Twist::from_vector(&(adjoint(&a) * d.to_vector()));
            let rhs = exp_map(&moved).compose(&a);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-8);
        }

        #[test]
        fn geodesic_is_symmetric_and_rotation_invariant(a in pose_strategy(), b in pose_strategy(), w in twist_strategy(PI - 1e-3)) {
            let g = SE3Pose::from_rotation(*exp_map(&Twist::new(Vec3::zeros(), w.omega)).rotation()).unwrap();
            let d = geodesic_distance(&a, &b);
            prop_assert!((d - geodesic_distance(&b, &a)).abs() < 1e-12);
            prop_assert!((d - geodesic_distance(&g.compose(&a), &g.compose(&b))).abs() < 1e-9);
        }

        #[test]
        fn interpolation_endpoints(a in pose_strategy(), b in pose_strategy()) {
            prop_assume!(b.compose(&a.inverse()).angle() < PI - 1e-3);
            prop_assert_eq!(interpolate(1.0, &a, &b).unwrap(), a);
            prop_assert!(interpolate(0.0, &a, &b).unwrap().max_abs_diff(&b) < 1e-12);
        }
    }
}
