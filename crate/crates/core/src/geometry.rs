//! SO(3)/SE(3) arithmetic, the 6D rotation representation, weighted
//! Procrustes alignment and the rotation/translation error metrics.
//!
//! Pose convention: a [`RigidPose`] `T_u` maps world coordinates into frame
//! `u`. The relative pose of an edge `(u, v)` is `T_uv = T_u ∘ T_v⁻¹`, i.e. it
//! maps frame-`v` coordinates into frame `u`, so `R_uv = R_u R_vᵀ` and
//! `t_uv = t_u − R_u R_vᵀ t_v`. Every module uses this single convention.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Wraps a matrix, rejecting anything that is not orthonormal with
    /// determinant +1 to within `1e-6`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let r = Rotation(m);
        if r.orthonormality_error() > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRotation);
        }
        Ok(r)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let k = axis / n;
        let kx = skew(&k);
        let m = Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos());
        Rotation(m)
    }

    /// Intrinsic Z-Y-X Euler angles (yaw, pitch, roll) in radians.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        let z = Self::from_axis_angle(&Vector3::z(), yaw);
        let y = Self::from_axis_angle(&Vector3::y(), pitch);
        let x = Self::from_axis_angle(&Vector3::x(), roll);
        z.compose(&y).compose(&x)
    }

    /// Rotation from three Euler angles drawn uniformly in [-180°, 180°].
    pub fn random_euler<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let pi = std::f64::consts::PI;
        let yaw = rng.gen_range(-pi..=pi);
        let pitch = rng.gen_range(-pi..=pi);
        let roll = rng.gen_range(-pi..=pi);
        Self::from_euler_zyx(yaw, pitch, roll)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0 * p
    }

    /// Row-major flattening.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64]) -> Self {
        Rotation(Matrix3::new(
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8],
        ))
    }

    /// Max-abs entry of `R Rᵀ − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0 * self.0.transpose() - Matrix3::identity()).abs().max()
    }

    /// First two columns stacked, the inverse of [`sixd_to_rotation`].
    pub fn to_sixd(&self) -> Sixd {
        let m = &self.0;
        Sixd([
            m[(0, 0)],
            m[(1, 0)],
            m[(2, 0)],
            m[(0, 1)],
            m[(1, 1)],
            m[(2, 1)],
        ])
    }
}

pub(crate) fn skew(k: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0)
}

/// Element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub r: Rotation,
    pub t: Vector3<f64>,
}

impl RigidPose {
    pub fn new(r: Rotation, t: Vector3<f64>) -> Self {
        RigidPose { r, t }
    }

    pub fn identity() -> Self {
        RigidPose {
            r: Rotation::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r.apply(p) + self.t
    }

    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidPose {
        inverse(self)
    }

    /// `T_uv = T_u ∘ T_v⁻¹` for absolute poses `T_u` (self) and `T_v`.
    pub fn relative_to(&self, other: &RigidPose) -> RigidPose {
        compose(self, &inverse(other))
    }

    /// Random pose with Euler angles in [-180°, 180°] and translation
    /// components uniform in `[-t_range, t_range]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, t_range: f64) -> Self {
        let r = Rotation::random_euler(rng);
        let t = Vector3::new(
            rng.gen_range(-t_range..=t_range),
            rng.gen_range(-t_range..=t_range),
            rng.gen_range(-t_range..=t_range),
        );
        RigidPose { r, t }
    }
}

/// `a ∘ b`: rotation `a.r·b.r`, translation `a.r·b.t + a.t`.
pub fn compose(a: &RigidPose, b: &RigidPose) -> RigidPose {
    RigidPose {
        r: a.r.compose(&b.r),
        t: a.r.apply(&b.t) + a.t,
    }
}

pub fn inverse(a: &RigidPose) -> RigidPose {
    let rt = a.r.transpose();
    RigidPose {
        r: rt,
        t: -(rt.apply(&a.t)),
    }
}

/// Continuous 6D rotation parameterization: two stacked 3-vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sixd(pub [f64; 6]);

const SIXD_EPS: f64 = 1e-8;

/// Gram-Schmidt orthogonalization of the two 3-vectors into the first two
/// columns of a rotation; the third column is their cross product.
pub fn sixd_to_rotation(s: &Sixd) -> Result<Rotation> {
    let a1 = Vector3::new(s.0[0], s.0[1], s.0[2]);
    let a2 = Vector3::new(s.0[3], s.0[4], s.0[5]);
    let n1 = a1.norm();
    if !(n1 >= SIXD_EPS) {
        return Err(Error::DegenerateSixd);
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 >= SIXD_EPS) {
        return Err(Error::DegenerateSixd);
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Rotation(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Geodesic angle between two rotations, in `[0, π]` radians.
pub fn rotation_error(pred: &Rotation, gt: &Rotation) -> f64 {
    // atan2 of sin and cos parts stays accurate near 0 and π, where acos
    // of the trace loses half the digits
    let m = pred.0.transpose() * gt.0;
    let c = (m.trace() - 1.0) / 2.0;
    let s = 0.5
        * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    s.atan2(c).clamp(0.0, std::f64::consts::PI)
}

pub fn translation_error(pred: &Vector3<f64>, gt: &Vector3<f64>) -> f64 {
    (pred - gt).norm()
}

/// Weighted least-squares rigid transform `T` minimizing
/// `Σ wᵢ ‖T(srcᵢ) − dstᵢ‖²`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: &[f64]) -> Result<RigidPose> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: if dst.len() != src.len() {
                dst.len()
            } else {
                weights.len()
            },
        });
    }
    let wsum: f64 = weights.iter().sum();
    if src.len() < 3 || !(wsum > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::DegenerateConfiguration);
    }
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cs += s * *w;
        cd += d * *w;
    }
    cs /= wsum;
    cd /= wsum;

    let mut h = Matrix3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        h += (d - cd) * (s - cs).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::DegenerateConfiguration),
    };
    let sv = svd.singular_values;
    let smax = sv.max();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(smax > 0.0) || sorted[1] <= smax * 1e-12 {
        return Err(Error::DegenerateConfiguration);
    }
    let d = (u * vt).determinant().signum();
    let corr = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    // nalgebra does not order singular values, so the correction must hit
    // the column of the smallest one.
    let (u, vt) = reorder_svd(u, sv, vt);
    let r = u * corr * vt;
    let r = Rotation(r);
    let t = cd - r.apply(&cs);
    Ok(RigidPose { r, t })
}

fn reorder_svd(
    u: Matrix3<f64>,
    sv: Vector3<f64>,
    vt: Matrix3<f64>,
) -> (Matrix3<f64>, Matrix3<f64>) {
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let u2 = Matrix3::from_columns(&[u.column(idx[0]), u.column(idx[1]), u.column(idx[2])]);
    let vt2 = Matrix3::from_rows(&[vt.row(idx[0]), vt.row(idx[1]), vt.row(idx[2])]);
    (u2, vt2)
}

/// JSON form of a pose: row-major `R` and `t`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&RigidPose> for PoseJson {
    fn from(p: &RigidPose) -> Self {
        PoseJson {
            r: p.r.to_row_major(),
            t: [p.t.x, p.t.y, p.t.z],
        }
    }
}

impl From<&PoseJson> for RigidPose {
    fn from(p: &PoseJson) -> Self {
        RigidPose {
            r: Rotation::from_row_major(&p.r),
            t: Vector3::new(p.t[0], p.t[1], p.t[2]),
        }
    }
}
