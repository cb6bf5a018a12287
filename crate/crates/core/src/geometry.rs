//! SE(3) / so(3) arithmetic and the ICP pose-error metric.
//!
//! Twists are ordered translation-first, `[rho; phi]`. Rigid transforms act on
//! points as `p' = R p + t`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// 6-vector `[rho_x, rho_y, rho_z, phi_x, phi_y, phi_z]`.
pub type Twist = Vector6<f64>;

/// Below this rotation magnitude the closed forms switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

const RIGID_TOLERANCE: f64 = 1e-6;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k2;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + k * a + k2 * b
}

/// Rotation vector of `r`, with angle in `[0, pi]`.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let skew = vee(&(r - r.transpose())) * 0.5;
    let sin_theta = skew.norm();
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        return skew;
    }
    if cos_theta > -0.99 {
        return skew * (theta / sin_theta);
    }

    // Near pi the skew part vanishes; read the axis off the symmetric part
    // R = cos I + (1 - cos) a a^T + sin a^.
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let i = (0..3)
        .max_by(|&a, &b| aat[(a, a)].total_cmp(&aat[(b, b)]))
        .unwrap_or(0);
    let ai = aat[(i, i)].max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for j in 0..3 {
        axis[j] = if j == i { ai } else { aat[(i, j)] / ai };
    }
    axis.normalize_mut();
    if skew.norm() > 1e-12 {
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
    } else if axis[i] < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3).
pub fn left_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k * 0.5 + k2 / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity()
        + k * ((1.0 - theta.cos()) / t2)
        + k2 * ((theta - theta.sin()) / (t2 * theta))
}

pub fn left_jacobian_so3_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() - k * 0.5 + k2 / 12.0;
    }
    let half = 0.5 * theta;
    let cot_half = half.cos() / half.sin();
    let c = 1.0 / (theta * theta) - cot_half / (2.0 * theta);
    Matrix3::identity() - k * 0.5 + k2 * c
}

/// Coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn left_jacobian_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let rx = hat(rho);
    let px = hat(phi);
    let pr = px * rx;
    let rp = rx * px;
    let prp = pr * px;
    let ppr = px * pr;
    let rpp = rp * px;
    let prpp = prp * px;
    let pprp = ppr * px;

    let (c1, c2, c3) = if theta < 1e-4 {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t3),
        )
    };
    rx * 0.5 + (pr + rp + prp) * c1 + (ppr + rpp - prp * 3.0) * c2 + (prpp + pprp) * c3
}

/// Left Jacobian of SE(3): `exp(xi + d) ~= exp(J_l(xi) d) exp(xi)`.
pub fn left_jacobian_se3(xi: &Twist) -> Matrix6<f64> {
    let rho: Vector3<f64> = xi.fixed_rows::<3>(0).into();
    let phi: Vector3<f64> = xi.fixed_rows::<3>(3).into();
    let j = left_jacobian_so3(&phi);
    let q = left_jacobian_q(&rho, &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

/// Inverse of [`left_jacobian_se3`]: `log(exp(e) T) ~= log(T) + J_l^-1 e`.
pub fn left_jacobian_se3_inv(xi: &Twist) -> Matrix6<f64> {
    let rho: Vector3<f64> = xi.fixed_rows::<3>(0).into();
    let phi: Vector3<f64> = xi.fixed_rows::<3>(3).into();
    let j_inv = left_jacobian_so3_inv(&phi);
    let q = left_jacobian_q(&rho, &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-j_inv * q * j_inv));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out
}

/// A rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self {
            rotation: r,
            translation: Vector3::zeros(),
        }
    }

    /// Intrinsic z-y-x Euler angles (radians): `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        let rz = exp_so3(&Vector3::new(0.0, 0.0, yaw));
        let ry = exp_so3(&Vector3::new(0.0, pitch, 0.0));
        let rx = exp_so3(&Vector3::new(roll, 0.0, 0.0));
        Self {
            rotation: rz * ry * rx,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::NotRigid("non-finite entries".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        if ortho > RIGID_TOLERANCE {
            return Err(Error::NotRigid(format!("|R^T R - I| = {ortho:e}")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > RIGID_TOLERANCE {
            return Err(Error::NotRigid(format!("det R = {det}")));
        }
        Ok(())
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::NotRigid(format!("bottom row {bottom:?}")));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into(),
            m.fixed_view::<3, 1>(0, 3).into(),
        )
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::NotRigid(format!(
                "expected 16 entries, got {}",
                values.len()
            )));
        }
        Self::from_matrix(&Matrix4::from_row_slice(values))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Adjoint in translation-first ordering: `T exp(d) T^-1 = exp(Ad_T d)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * self.rotation));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m = self.to_matrix();
        let rows: [[f64; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixRepr {
    Nested(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let flat = match MatrixRepr::deserialize(d)? {
            MatrixRepr::Flat(v) => v,
            MatrixRepr::Nested(rows) => {
                if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
                    return Err(serde::de::Error::custom("pose must be a 4x4 matrix"));
                }
                rows.concat()
            }
        };
        Pose::from_row_major(&flat).map_err(serde::de::Error::custom)
    }
}

pub fn exp_se3(xi: &Twist) -> Pose {
    let rho: Vector3<f64> = xi.fixed_rows::<3>(0).into();
    let phi: Vector3<f64> = xi.fixed_rows::<3>(3).into();
    Pose {
        rotation: exp_so3(&phi),
        translation: left_jacobian_so3(&phi) * rho,
    }
}

pub fn log_se3(pose: &Pose) -> Twist {
    let phi = log_so3(&pose.rotation);
    let rho = left_jacobian_so3_inv(&phi) * pose.translation;
    Twist::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
}

/// ICP pose error split into translation and rotation parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl PoseError {
    pub fn from_twist(xi: &Twist) -> Self {
        Self {
            rho: xi.fixed_rows::<3>(0).into(),
            phi: xi.fixed_rows::<3>(3).into(),
        }
    }

    pub fn twist(&self) -> Twist {
        Twist::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    /// Lateral/longitudinal translation error, `sqrt(rho_x^2 + rho_y^2)`.
    pub fn planar_norm(&self) -> f64 {
        self.rho.x.hypot(self.rho.y)
    }
}

/// `xi = log(T_hat * T_gt^-1)`.
pub fn pose_error(estimate: &Pose, ground_truth: &Pose) -> PoseError {
    PoseError::from_twist(&log_se3(&estimate.compose(&ground_truth.inverse())))
}

/// Closed interval used for pose sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const ZERO: Interval = Interval { lo: 0.0, hi: 0.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn symmetric(half_width: f64) -> Self {
        Self::new(-half_width, half_width)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::EmptyInterval {
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

/// Per-axis sampling ranges for a ground-truth transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    /// x, y, z translation ranges.
    pub translation: [Interval; 3],
    /// roll, pitch, yaw ranges in degrees.
    pub rotation_deg: [Interval; 3],
}

impl PoseRanges {
    /// Planar objects: x/y in +-0.08, yaw in +-10 degrees.
    pub fn shapenet() -> Self {
        Self {
            translation: [
                Interval::symmetric(0.08),
                Interval::symmetric(0.08),
                Interval::ZERO,
            ],
            rotation_deg: [Interval::ZERO, Interval::ZERO, Interval::symmetric(10.0)],
        }
    }

    /// Driving scans: +-0.3 m on every axis, +-10 degrees about every axis.
    pub fn boreas() -> Self {
        Self {
            translation: [Interval::symmetric(0.3); 3],
            rotation_deg: [Interval::symmetric(10.0); 3],
        }
    }

    pub fn zero() -> Self {
        Self {
            translation: [Interval::ZERO; 3],
            rotation_deg: [Interval::ZERO; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.translation
            .iter()
            .chain(self.rotation_deg.iter())
            .try_for_each(Interval::validate)
    }

    /// Draws translation x, y, z then roll, pitch, yaw from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Pose> {
        self.validate()?;
        let t = Vector3::new(
            self.translation[0].sample(rng),
            self.translation[1].sample(rng),
            self.translation[2].sample(rng),
        );
        let [roll, pitch, yaw] = self.rotation_deg.map(|i| i.sample(rng).to_radians());
        Ok(Pose::from_euler_zyx(roll, pitch, yaw, t))
    }
}

pub fn sample_random_pose(
    trans_range: [Interval; 3],
    rot_range_deg: [Interval; 3],
    seed: u64,
) -> Result<Pose> {
    let ranges = PoseRanges {
        translation: trans_range,
        rotation_deg: rot_range_deg,
    };
    ranges.sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Truncated power series of the 4x4 twist matrix.
    fn exp_series(xi: &Twist, terms: usize) -> Matrix4<f64> {
        let mut a = Matrix4::zeros();
        let phi = Vector3::new(xi[3], xi[4], xi[5]);
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&phi));
        a[(0, 3)] = xi[0];
        a[(1, 3)] = xi[1];
        a[(2, 3)] = xi[2];
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..terms {
            term = term * a / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn zero_twist_is_identity() {
        assert_eq!(exp_se3(&Twist::zeros()), Pose::identity());
        assert_eq!(log_se3(&Pose::identity()), Twist::zeros());
    }

    #[test]
    fn pure_translation_twist() {
        let p = exp_se3(&Twist::new(0.5, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn exp_matches_series() {
        let xi = Twist::new(0.1, -0.2, 0.05, 0.01, 0.02, -0.03);
        let oracle = exp_series(&xi, 12);
        assert_relative_eq!(exp_se3(&xi).to_matrix(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let xi = log_se3(&Pose::from_rotation(r));
        assert_relative_eq!(
            xi,
            Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2),
            epsilon = 1e-12
        );
        // Numerical matrix log oracle: exponentiate back with the series.
        assert_relative_eq!(
            exp_series(&xi, 40),
            Pose::from_rotation(r).to_matrix(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_at_pi_is_stable() {
        for axis in [
            Vector3::x(),
            Vector3::y(),
            Vector3::new(1.0, 1.0, 0.0).normalize(),
        ] {
            let r = exp_so3(&(axis * PI));
            let phi = log_so3(&r);
            assert_relative_eq!(phi.norm(), PI, epsilon = 1e-9);
            assert_relative_eq!(exp_so3(&phi), r, epsilon = 1e-9);
        }
        // just below pi, the skew sign must survive
        let phi = Vector3::new(0.3, -0.2, 0.9).normalize() * (PI - 1e-7);
        assert_relative_eq!(log_so3(&exp_so3(&phi)), phi, epsilon = 1e-6);
    }

    #[test]
    fn pose_error_examples() {
        let t = exp_se3(&Twist::new(0.3, 0.1, -0.2, 0.1, 0.2, 0.3));
        assert_relative_eq!(pose_error(&t, &t).twist(), Twist::zeros(), epsilon = 1e-12);
        let e = pose_error(
            &Pose::from_translation(Vector3::new(0.5, 0.0, 0.0)),
            &Pose::identity(),
        );
        assert_eq!(e.rho, Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(e.phi, Vector3::zeros());
        assert_eq!(e.planar_norm(), 0.5);
    }

    #[test]
    fn sampling_profiles() {
        assert_eq!(
            sample_random_pose([Interval::ZERO; 3], [Interval::ZERO; 3], 4).unwrap(),
            Pose::identity()
        );
        let bad = [Interval::new(1.0, 0.0), Interval::ZERO, Interval::ZERO];
        assert!(matches!(
            sample_random_pose(bad, [Interval::ZERO; 3], 0),
            Err(Error::EmptyInterval { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = PoseRanges::shapenet().sample(&mut rng).unwrap();
            assert!(p.translation.x.abs() <= 0.08 && p.translation.y.abs() <= 0.08);
            assert_eq!(p.translation.z, 0.0);
            let phi = log_so3(&p.rotation);
            assert_eq!((phi.x, phi.y), (0.0, 0.0));
            assert!(phi.z.abs() <= 10f64.to_radians() + 1e-12);

            let p = PoseRanges::boreas().sample(&mut rng).unwrap();
            assert!(p.translation.iter().all(|t| t.abs() <= 0.3));
            let (roll, pitch, yaw) = euler_zyx(&p.rotation);
            for a in [roll, pitch, yaw] {
                assert!(a.abs() <= 10f64.to_radians() + 1e-9);
            }
        }
        let a = sample_random_pose(
            PoseRanges::boreas().translation,
            PoseRanges::boreas().rotation_deg,
            3,
        );
        let b = sample_random_pose(
            PoseRanges::boreas().translation,
            PoseRanges::boreas().rotation_deg,
            3,
        );
        assert_eq!(a.unwrap(), b.unwrap());
    }

    fn euler_zyx(r: &Matrix3<f64>) -> (f64, f64, f64) {
        let pitch = (-r[(2, 0)]).asin();
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        (roll, pitch, yaw)
    }

    #[test]
    fn non_rigid_matrix_rejected() {
        let mut m = [0.0; 16];
        m[0] = 2.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        assert!(matches!(Pose::from_row_major(&m), Err(Error::NotRigid(_))));
    }

    #[test]
    fn serde_round_trip() {
        let p = exp_se3(&Twist::new(0.3, 0.1, -0.2, 0.1, 0.2, 0.3));
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.starts_with("[["));
        let back: Pose = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let flat: Pose = serde_json::to_string(&p.to_row_major())
            .and_then(|s| serde_json::from_str(&s))
            .unwrap();
        assert_eq!(flat, p);
    }

    /// Central differences of the log map under left perturbation.
    #[test]
    fn se3_jacobians_match_numeric() {
        let xi = Twist::new(0.4, -0.3, 0.2, 0.5, -0.7, 0.9);
        let t = exp_se3(&xi);
        let h = 1e-6;
        let j_inv = left_jacobian_se3_inv(&xi);
        let j = left_jacobian_se3(&xi);
        for k in 0..6 {
            let mut e = Twist::zeros();
            e[k] = h;
            let plus = log_se3(&(exp_se3(&e) * t));
            let minus = log_se3(&(exp_se3(&-e) * t));
            let col = (plus - minus) / (2.0 * h);
            assert_relative_eq!(col, j_inv.column(k).into_owned(), epsilon = 1e-7);

            let fwd = log_se3(&(exp_se3(&(xi + e)) * exp_se3(&(xi - e)).inverse())) / (2.0 * h);
            assert_relative_eq!(fwd, j.column(k).into_owned(), epsilon = 1e-6);
        }
        assert_relative_eq!(j * j_inv, Matrix6::identity(), epsilon = 1e-12);
        // series and closed form agree across the switch point
        let axis = Vector3::new(0.6, -0.48, 0.64);
        let below = axis * (1e-4 * (1.0 - 1e-6));
        let above = axis * (1e-4 * (1.0 + 1e-6));
        let lift = |phi: Vector3<f64>| Twist::new(0.4, -0.3, 0.2, phi.x, phi.y, phi.z);
        assert_relative_eq!(
            left_jacobian_se3(&lift(below)),
            left_jacobian_se3(&lift(above)),
            epsilon = 1e-9
        );
    }

    #[test]
    fn adjoint_conjugates_twists() {
        let t = exp_se3(&Twist::new(0.4, -0.3, 0.2, 0.5, -0.7, 0.9));
        let d = Twist::new(0.01, 0.02, -0.03, 0.02, -0.01, 0.015);
        let lhs = t * exp_se3(&d) * t.inverse();
        let rhs = exp_se3(&(t.adjoint() * d));
        assert_relative_eq!(lhs.to_matrix(), rhs.to_matrix(), epsilon = 1e-12);
    }

    #[test]
    fn lie_round_trip_thousand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut xi = Twist::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let phi = Vector3::new(xi[3], xi[4], xi[5]);
            if phi.norm() >= 3.0 {
                let s = 2.9 / phi.norm();
                for k in 3..6 {
                    xi[k] *= s;
                }
            }
            assert_relative_eq!(log_se3(&exp_se3(&xi)), xi, epsilon = 1e-8);
        }
    }

    fn twist_strategy(max_angle: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-1.0..1.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            0.0..max_angle,
        )
            .prop_map(|(rho, axis, angle)| {
                let a = Vector3::from(axis);
                let phi = if a.norm() > 1e-6 {
                    a.normalize() * angle
                } else {
                    Vector3::zeros()
                };
                Twist::new(rho[0], rho[1], rho[2], phi.x, phi.y, phi.z)
            })
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(xi in twist_strategy(3.1)) {
            let p = exp_se3(&xi);
            let id = p * p.inverse();
            prop_assert!((id.to_matrix() - Matrix4::identity()).norm() < 1e-9);
            prop_assert!(p.validate().is_ok());
        }

        #[test]
        fn pose_error_right_invariant(a in twist_strategy(2.0), b in twist_strategy(2.0), s in twist_strategy(3.0)) {
            let (ta, tb, ts) = (exp_se3(&a), exp_se3(&b), exp_se3(&s));
            let e1 = pose_error(&(ta * ts), &(tb * ts)).twist();
            let e2 = pose_error(&ta, &tb).twist();
            prop_assert!((e1 - e2).amax() < 1e-8);
        }

        #[test]
        fn pose_error_compositional(a in twist_strategy(1.5), b in twist_strategy(1.5)) {
            let (ta, tb) = (exp_se3(&a), exp_se3(&b));
            let e = pose_error(&ta, &tb).twist();
            prop_assert_eq!(e, log_se3(&ta.compose(&tb.inverse())));
            prop_assert!(e.norm() > 1e-10 || (ta.to_matrix() - tb.to_matrix()).norm() < 1e-8);
        }
    }
}
