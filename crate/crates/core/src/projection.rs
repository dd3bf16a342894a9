//! Scaled orthographic camera `q = s·[I₂|0]·R·p + t`, landmark loss and pose estimation.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{LandmarkSpec, LANDMARK_COUNT};
use crate::mesh::TriangleMesh;
use crate::rotation::polar_decompose;
use crate::scalar::Real;

pub const CAMERA_SCHEMA: &str = "camera/v1";

/// Orthographic camera. `R = Rx(pitch)·Ry(yaw)·Rz(roll)` (intrinsic x, then y, then z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionParams<T: Real> {
    /// Pixels per model unit.
    pub scale: T,
    pub pitch: T,
    pub yaw: T,
    pub roll: T,
    pub translation: Vector2<T>,
}

impl<T: Real> ProjectionParams<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            pitch: T::zero(),
            yaw: T::zero(),
            roll: T::zero(),
            translation: Vector2::zeros(),
        }
    }

    pub fn new(scale: T, euler: [T; 3], translation: Vector2<T>) -> Result<Self> {
        let p = Self {
            scale,
            pitch: euler[0],
            yaw: euler[1],
            roll: euler[2],
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.scale,
            self.pitch,
            self.yaw,
            self.roll,
            self.translation.x,
            self.translation.y,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("camera parameters"));
        }
        if !(self.scale > T::zero()) {
            return Err(Error::InvalidArgument(
                "camera scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        euler_to_matrix(self.pitch, self.yaw, self.roll)
    }

    /// `Π = s·[I₂|0]`.
    pub fn pi_matrix(&self) -> Matrix2x3<T> {
        let z = T::zero();
        Matrix2x3::new(self.scale, z, z, z, self.scale, z)
    }

    /// `Π R`, the linear part of the projection.
    pub fn linear_part(&self) -> Matrix2x3<T> {
        self.pi_matrix() * self.rotation_matrix()
    }

    pub fn project(&self, p: &Vector3<T>) -> Vector2<T> {
        self.linear_part() * p + self.translation
    }

    pub fn to_document(&self) -> CameraDocument {
        CameraDocument {
            schema: CAMERA_SCHEMA.into(),
            s: self.scale.as_f64(),
            pitch: self.pitch.as_f64(),
            yaw: self.yaw.as_f64(),
            roll: self.roll.as_f64(),
            tx: self.translation.x.as_f64(),
            ty: self.translation.y.as_f64(),
        }
    }

    pub fn from_document(doc: &CameraDocument) -> Result<Self> {
        if doc.schema != CAMERA_SCHEMA {
            return Err(Error::InvalidArgument(format!(
                "unsupported camera schema '{}'",
                doc.schema
            )));
        }
        Self::new(
            T::lit(doc.s),
            [T::lit(doc.pitch), T::lit(doc.yaw), T::lit(doc.roll)],
            Vector2::new(T::lit(doc.tx), T::lit(doc.ty)),
        )
    }
}

/// Camera parameters as six named scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDocument {
    pub schema: String,
    pub s: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
}

pub fn euler_to_matrix<T: Real>(pitch: T, yaw: T, roll: T) -> Matrix3<T> {
    let (o, z) = (T::one(), T::zero());
    let (sa, ca) = pitch.sin_cos();
    let (sb, cb) = yaw.sin_cos();
    let (sc, cc) = roll.sin_cos();
    let rx = Matrix3::new(o, z, z, z, ca, -sa, z, sa, ca);
    let ry = Matrix3::new(cb, z, sb, z, o, z, -sb, z, cb);
    let rz = Matrix3::new(cc, -sc, z, sc, cc, z, z, z, o);
    rx * ry * rz
}

/// Inverse of [`euler_to_matrix`] with yaw in [−π/2, π/2].
pub fn matrix_to_euler<T: Real>(r: &Matrix3<T>) -> [T; 3] {
    let sb = r[(0, 2)].max(-T::one()).min(T::one());
    let yaw = sb.asin();
    let pitch = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let roll = (-r[(0, 1)]).atan2(r[(0, 0)]);
    [pitch, yaw, roll]
}

/// `Σᵢ ‖ΠR p′ᵢ + t − qᵢ‖²` over the landmark set, in pixels².
pub fn landmark_loss<T: Real>(
    params: &ProjectionParams<T>,
    mesh: &TriangleMesh<T>,
    lms: &LandmarkSpec<T>,
) -> T {
    let a = params.linear_part();
    let v = mesh.vertices();
    lms.indices
        .iter()
        .zip(&lms.points)
        .map(|(&i, q)| (a * v[i] + params.translation - q).norm_squared())
        .fold(T::zero(), |x, y| x + y)
}

/// Per-landmark projections of `mesh`.
pub fn reproject<T: Real>(
    params: &ProjectionParams<T>,
    mesh: &TriangleMesh<T>,
    lms: &LandmarkSpec<T>,
) -> Vec<Vector2<T>> {
    lms.indices
        .iter()
        .map(|&i| params.project(&mesh.vertices()[i]))
        .collect()
}

/// Root-mean-square landmark residual `√(E_lan / 68)`.
pub fn fitting_error<T: Real>(e_lan: T) -> T {
    fitting_error_over(e_lan, LANDMARK_COUNT)
}

/// `√(E_lan / count)`.
pub fn fitting_error_over<T: Real>(e_lan: T, count: usize) -> T {
    (e_lan.max(T::zero()) / T::from_count(count.max(1))).sqrt()
}

/// Camera from 2D–3D landmark correspondences.
///
/// Stage one fits an unconstrained affine map `q ≈ M p + t`. Stage two projects `M` onto
/// scaled rotation rows: the rows are completed to 3×3 with their cross product, the
/// rotation factor of the polar decomposition is kept, and `s` is the mean of `M`'s two
/// singular values. The translation is then re-fit for the structured camera.
pub fn estimate_params<T: Real>(
    mesh: &TriangleMesh<T>,
    lms: &LandmarkSpec<T>,
) -> Result<ProjectionParams<T>> {
    lms.validate_for(mesh)?;
    let n = lms.len();
    if n < 4 {
        return Err(Error::InvalidLandmarks(format!(
            "pose estimation needs 4 landmarks, got {n}"
        )));
    }
    let pts: Vec<Vector3<T>> = lms.indices.iter().map(|&i| mesh.vertices()[i]).collect();
    let nn = T::from_count(n);
    let pc = pts.iter().fold(Vector3::zeros(), |a, b| a + b) / nn;
    let qc = lms.points.iter().fold(Vector2::zeros(), |a, b| a + b) / nn;
    let mut ppt = Matrix3::zeros();
    let mut qpt = Matrix2x3::zeros();
    for (p, q) in pts.iter().zip(&lms.points) {
        let dp = p - pc;
        let dq = q - qc;
        ppt += dp * dp.transpose();
        qpt += dq * dp.transpose();
    }
    let ev = ppt.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if !(hi > T::zero()) || lo <= T::lit(1e-12) * hi {
        return Err(Error::InvalidLandmarks(
            "rank-deficient landmark configuration".into(),
        ));
    }
    let inv = ppt
        .try_inverse()
        .ok_or_else(|| Error::InvalidLandmarks("rank-deficient landmark configuration".into()))?;
    let m = qpt * inv;

    let sv = m.svd(false, false).singular_values;
    let scale = (sv[0] + sv[1]) * T::lit(0.5);
    if !(scale > T::zero()) {
        return Err(Error::InvalidLandmarks("degenerate affine camera".into()));
    }
    let r1: Vector3<T> = m.row(0).transpose();
    let r2: Vector3<T> = m.row(1).transpose();
    let r3 = r1.cross(&r2) / scale;
    let full = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    let (rot, _) = polar_decompose(&full)?;
    let euler = matrix_to_euler(rot.matrix());
    let mut params = ProjectionParams {
        scale,
        pitch: euler[0],
        yaw: euler[1],
        roll: euler[2],
        translation: Vector2::zeros(),
    };
    params.translation = qc - params.linear_part() * pc;
    params.validate()?;
    Ok(params)
}
