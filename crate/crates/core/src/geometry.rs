//! Pinhole projection and SE(3)/se(3) machinery.
//!
//! A [`Pose`] maps point-cloud coordinates into the camera frame. Twists are
//! ordered `(omega, v)`: rotation part first, translation part second.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pixel coordinates `(u, v)`.
pub type Pixel = nalgebra::Point2<f64>;
/// Point in meters.
pub type Point3 = nalgebra::Point3<f64>;

/// Points with camera-frame depth at or below this value are not projected.
pub const DEFAULT_Z_MIN: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;
const SERIES_ANGLE: f64 = 1e-3;
const LOG_PI_MARGIN: f64 = 1e-6;
const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is not in front of the camera (z = {z})")]
    NotInFrontOfCamera { z: f64 },
    #[error("rotation angle {angle} rad is too close to pi for the log map")]
    NearPiRotation { angle: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a proper rotation: {0}")]
    InvalidRotation(String),
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
}

impl CameraIntrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64) -> Result<Self, GeometryError> {
        let k = Self { fu, fv, cu, cv };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fu > 0.0 && self.fu.is_finite() && self.fv > 0.0 && self.fv.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fu={} fv={}",
                self.fu, self.fv
            )));
        }
        if !(self.cu.is_finite() && self.cv.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn max_focal(&self) -> f64 {
        self.fu.max(self.fv)
    }

    /// Projects a camera-frame point.
    pub fn project_camera_point(&self, pc: &Vector3<f64>, z_min: f64) -> Result<Pixel, GeometryError> {
        if !(pc.z > z_min) {
            return Err(GeometryError::NotInFrontOfCamera { z: pc.z });
        }
        Ok(Pixel::new(
            self.fu * pc.x / pc.z + self.cu,
            self.fv * pc.y / pc.z + self.cv,
        ))
    }

    /// Lifts a pixel to the camera frame at the given depth (z coordinate).
    pub fn back_project(&self, q: &Pixel, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (q.x - self.cu) / self.fu * depth,
            (q.y - self.cv) / self.fv * depth,
            depth,
        )
    }

    /// Derivative of the projected pixel with respect to the camera-frame point.
    pub fn projection_jacobian(&self, pc: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fu * iz,
            0.0,
            -self.fu * pc.x * iz2,
            0.0,
            self.fv * iz,
            -self.fv * pc.y * iz2,
        )
    }
}

/// Rigid transform from the point-cloud frame to the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
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

    /// Builds a pose, checking that `rotation` is in SO(3) to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if ortho > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidRotation(format!(
                "|R R^T - I|_max = {ortho:e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidRotation(format!("det(R) = {det}")));
        }
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::InvalidRotation("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn transform(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic angle of `R_self R_other^T`, in degrees.
    pub fn rotation_error_deg(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation * other.rotation.transpose())).to_degrees()
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Pose with the rotation re-orthonormalized through its SVD.
    pub fn orthonormalized(&self) -> Pose {
        Pose {
            rotation: project_to_so3(&self.rotation),
            translation: self.translation,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = self.rotation[(i, j)];
            }
        }
        PoseRepr {
            r,
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let rotation = Matrix3::from_row_slice(&repr.r);
        let translation = Vector3::from(repr.t);
        Pose::new(rotation, translation)
            // Rotations written with limited precision are re-projected rather than rejected.
            .or_else(|e| {
                let drift = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
                if drift < 1e-4 && rotation.determinant() > 0.0 {
                    Pose::new(project_to_so3(&rotation), translation)
                } else {
                    Err(e)
                }
            })
            .map_err(serde::de::Error::custom)
    }
}

/// se(3) tangent vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            omega: x.fixed_rows::<3>(0).into_owned(),
            v: x.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rotation angle in `[0, pi]`, computed with atan2 for accuracy near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}

/// Coefficients `(sinθ/θ, (1-cosθ)/θ², (θ-sinθ)/θ³)`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / t2)
    };
    // θ - sinθ cancels badly well above the exp branch threshold.
    let c = if theta < SERIES_ANGLE {
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (t2 * theta)
    };
    (a, b, c)
}

pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + w * b + w * w * c
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let theta = xi.omega.norm();
    let (a, b, c) = rodrigues_coeffs(theta);
    let w = hat(&xi.omega);
    let w2 = w * w;
    let rotation = Matrix3::identity() + w * a + w2 * b;
    let v_mat = Matrix3::identity() + w * b + w2 * c;
    Pose {
        rotation,
        translation: v_mat * xi.v,
    }
}

pub fn se3_log(t: &Pose) -> Result<Twist, GeometryError> {
    let r = &t.rotation;
    let theta = rotation_angle(r);
    if theta >= std::f64::consts::PI - LOG_PI_MARGIN {
        return Err(GeometryError::NearPiRotation { angle: theta });
    }
    let axis_scaled = vee(&(r - r.transpose()));
    let omega = if theta < SMALL_ANGLE {
        axis_scaled * (0.5 * (1.0 + theta * theta / 6.0))
    } else {
        axis_scaled * (theta / (2.0 * theta.sin()))
    };
    let w = hat(&omega);
    let coeff = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (a, b, _) = rodrigues_coeffs(theta);
        (1.0 - a / (2.0 * b)) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * coeff;
    Ok(Twist {
        omega,
        v: v_inv * t.translation,
    })
}

/// Left Jacobian of SE(3) for `(omega, v)` ordering:
/// `exp(xi + d) ≈ exp(J d) ∘ exp(xi)` with `J = [[Jl, 0], [Q, Jl]]`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let jl = so3_left_jacobian(&xi.omega);
    let q = se3_q_block(&xi.omega, &xi.v);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    out
}

fn se3_q_block(omega: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let t2 = theta * theta;
    // Closed forms lose all precision to cancellation for small angles.
    let (c1, c2, c3) = if theta < 1e-2 {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let w = hat(omega);
    let r = hat(v);
    let wr = w * r;
    let rw = r * w;
    let wrw = wr * w;
    let ww = w * w;
    r * 0.5 + (wr + rw + wrw) * c1 + (ww * r + rw * w - wrw * 3.0) * c2
        + (wrw * w + w * wrw) * c3
}

/// Camera-frame point `X = (exp(xi) ∘ base) p` and its derivative with respect to `xi`.
pub fn transformed_point_jacobian(
    xi: &Twist,
    base: &Pose,
    p: &Point3,
) -> (Vector3<f64>, Matrix3x6<f64>) {
    let pose = se3_exp(xi).compose(base);
    let x = pose.transform(p);
    let mut d_left = Matrix3x6::zeros();
    d_left.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&x)));
    d_left.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    (x, d_left * se3_left_jacobian(xi))
}

/// Projects `T·p`; fails when the transformed depth is at or below `z_min`.
pub fn project_with_z_min(
    p: &Point3,
    t: &Pose,
    k: &CameraIntrinsics,
    z_min: f64,
) -> Result<Pixel, GeometryError> {
    k.project_camera_point(&t.transform(p), z_min)
}

pub fn project(p: &Point3, t: &Pose, k: &CameraIntrinsics) -> Result<Pixel, GeometryError> {
    project_with_z_min(p, t, k, DEFAULT_Z_MIN)
}

/// Squared pixel distance between `q` and the projection of `p`.
pub fn reprojection_error(
    q: &Pixel,
    p: &Point3,
    t: &Pose,
    k: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    let proj = project(p, t, k)?;
    Ok((q - proj).norm_squared())
}
