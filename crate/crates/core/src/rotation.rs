//! Dense 3×3 rotation algebra: polar decomposition, the rotation logarithm and its
//! closed-form exponential.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Angles closer than this to π have no reliable axis.
pub const NEAR_PI_GUARD: f64 = 1e-6;

/// Cross-product matrix `[v]×`.
#[inline]
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Dual vector of the antisymmetric part of `m`.
#[inline]
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let h = T::lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * h,
        (m[(0, 2)] - m[(2, 0)]) * h,
        (m[(1, 0)] - m[(0, 1)]) * h,
    )
}

/// Proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation<T: Real>(Matrix3<T>);

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix after checking orthonormality and orientation to `tol`.
    pub fn from_matrix(m: Matrix3<T>, tol: T) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("rotation"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > tol || (det - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "not a rotation (orthogonality error {}, det {})",
                ortho.as_f64(),
                det.as_f64()
            )));
        }
        Ok(Self(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Self(m)
    }

    /// Rotation by `angle` about the (not necessarily unit) `axis`.
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        let n = axis.norm();
        if n == T::zero() {
            return Self::identity();
        }
        exp_skew(&SkewLog::from_vector(axis * (angle / n)))
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<T> {
        self.0
    }

    /// Angle of the relative rotation `self⁻¹ · other`, in [0, π].
    pub fn angle_to(&self, other: &Self) -> T {
        rotation_angle(&(self.0.transpose() * other.0))
    }
}

/// Symmetric scale/shear factor of a polar decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleShear<T: Real>(Matrix3<T>);

impl<T: Real> ScaleShear<T> {
    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<T> {
        self.0
    }
}

/// Antisymmetric rotation logarithm `θ·[ω]×`, stored as its dual vector `θω`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SkewLog<T: Real>(Vector3<T>);

impl<T: Real> SkewLog<T> {
    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn from_vector(v: Vector3<T>) -> Self {
        Self(v)
    }

    /// Dual vector of the antisymmetric part of `m`.
    pub fn from_matrix(m: &Matrix3<T>) -> Self {
        Self(vee(m))
    }

    pub fn vector(&self) -> &Vector3<T> {
        &self.0
    }

    pub fn matrix(&self) -> Matrix3<T> {
        skew(&self.0)
    }

    pub fn angle(&self) -> T {
        self.0.norm()
    }
}

/// Angle of a rotation matrix, in [0, π].
pub fn rotation_angle<T: Real>(r: &Matrix3<T>) -> T {
    let s = vee(r).norm();
    let c = (r.trace() - T::one()) * T::lit(0.5);
    s.atan2(c)
}

/// Factors `t = R·S` with `R` a proper rotation and `S` symmetric.
///
/// Uses the singular value decomposition `t = U Σ Vᵀ`. When `det t < 0` the singular
/// direction with the smallest singular value is negated so that `R` stays proper; the
/// reflection then lives in `S`.
pub fn polar_decompose<T: Real>(t: &Matrix3<T>) -> Result<(Rotation<T>, ScaleShear<T>)> {
    if t.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("deformation gradient"));
    }
    let svd = t.svd(true, true);
    let mut u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut sigma = svd.singular_values;
    if (u * v_t).determinant() < T::zero() {
        let k = sigma.imin();
        for r in 0..3 {
            u[(r, k)] = -u[(r, k)];
        }
        sigma[k] = -sigma[k];
    }
    let rot = u * v_t;
    let v = v_t.transpose();
    let s = v * Matrix3::from_diagonal(&sigma) * v_t;
    let s = (s + s.transpose()) * T::lit(0.5);
    Ok((Rotation(rot), ScaleShear(s)))
}

/// Matrix logarithm of a rotation.
///
/// Fails when the angle is within [`NEAR_PI_GUARD`] of π.
pub fn log_rotation<T: Real>(r: &Rotation<T>) -> Result<SkewLog<T>> {
    let (axis, angle) = axis_angle(r)?;
    Ok(SkewLog(axis * angle))
}

/// Axis and angle of a rotation. The identity returns `(e_x, 0)`.
pub fn axis_angle<T: Real>(r: &Rotation<T>) -> Result<(Vector3<T>, T)> {
    let m = &r.0;
    let w = vee(m);
    let s = w.norm();
    let c = (m.trace() - T::one()) * T::lit(0.5);
    let angle = s.atan2(c);
    if angle > T::pi() - T::lit(NEAR_PI_GUARD) {
        return Err(Error::AxisAmbiguousNearPi {
            angle: angle.as_f64(),
        });
    }
    if s == T::zero() {
        return Ok((Vector3::x(), T::zero()));
    }
    if c >= T::zero() {
        return Ok((w / s, angle));
    }
    // Large angles: (R + Rᵀ)/2 − cos θ·I = (1 − cos θ)·ωωᵀ is better conditioned than vee.
    let b = (m + m.transpose()) * T::lit(0.5) - Matrix3::identity() * c;
    let k = b.diagonal().imax();
    let mut axis: Vector3<T> = b.column(k).into_owned();
    axis /= axis.norm();
    if axis.dot(&w) < T::zero() {
        axis = -axis;
    }
    Ok((axis, angle))
}

/// Rodrigues evaluation of `exp(θ[ω]×)`.
pub fn exp_skew<T: Real>(l: &SkewLog<T>) -> Rotation<T> {
    let v = &l.0;
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < T::lit(1e-4) {
        // sinθ/θ and (1 − cosθ)/θ² by series.
        (
            T::one() - theta2 / T::lit(6.0) + theta2 * theta2 / T::lit(120.0),
            T::lit(0.5) - theta2 / T::lit(24.0) + theta2 * theta2 / T::lit(720.0),
        )
    } else {
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    let k = skew(v);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Right Jacobian of the exponential map: `exp([φ + δ]×) ≈ exp([φ]×)·exp([J_r(φ)δ]×)`.
pub fn right_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < T::lit(1e-4) {
        (
            T::lit(0.5) - theta2 / T::lit(24.0),
            T::one() / T::lit(6.0) - theta2 / T::lit(120.0),
        )
    } else {
        (
            (T::one() - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = skew(phi);
    Matrix3::identity() - k * a + k * k * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rot_z(a: f64) -> Matrix3<f64> {
        Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn polar_of_identity_and_spd() {
        let (r, s) = polar_decompose(&Matrix3::<f64>::identity()).unwrap();
        assert_relative_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-14);
        assert_relative_eq!(*s.matrix(), Matrix3::identity(), epsilon = 1e-14);
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 4.0));
        let (r, s) = polar_decompose(&d).unwrap();
        assert_relative_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-14);
        assert_relative_eq!(*s.matrix(), d, epsilon = 1e-13);
    }

    #[test]
    fn polar_recovers_rotation_and_stretch() {
        let r0 = rot_z(40f64.to_radians());
        let s0 = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let (r, s) = polar_decompose(&(r0 * s0)).unwrap();
        assert_relative_eq!(*r.matrix(), r0, epsilon = 1e-12);
        assert_relative_eq!(*s.matrix(), s0, epsilon = 1e-12);
    }

    #[test]
    fn polar_absorbs_reflection_into_scale() {
        let t = rot_z(0.3) * Matrix3::from_diagonal(&Vector3::new(2.0, 1.5, -0.5));
        let (r, s) = polar_decompose(&t).unwrap();
        assert_relative_eq!(r.matrix().determinant(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.matrix() * s.matrix(), t, epsilon = 1e-12);
        assert_relative_eq!(*s.matrix(), s.matrix().transpose(), epsilon = 1e-14);
        assert!(polar_decompose(&Matrix3::from_element(f64::NAN)).is_err());
    }

    #[test]
    fn log_of_identity_and_quarter_turn() {
        let l = log_rotation(&Rotation::<f64>::identity()).unwrap();
        assert_eq!(l.matrix(), Matrix3::zeros());
        let r = Rotation::from_matrix(rot_z(FRAC_PI_2), 1e-12).unwrap();
        let expected = Matrix3::new(0.0, -FRAC_PI_2, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(
            log_rotation(&r).unwrap().matrix(),
            expected,
            epsilon = 1e-14
        );
    }

    #[test]
    fn log_refuses_near_pi() {
        let r = Rotation::from_matrix(rot_z(PI - 1e-8), 1e-12).unwrap();
        assert!(matches!(
            log_rotation(&r),
            Err(Error::AxisAmbiguousNearPi { .. })
        ));
        let r = Rotation::from_matrix(rot_z(PI - 1e-4), 1e-12).unwrap();
        let l = log_rotation(&r).unwrap();
        assert_relative_eq!(l.angle(), PI - 1e-4, epsilon = 1e-10);
    }

    #[test]
    fn exp_examples() {
        assert_eq!(
            *exp_skew(&SkewLog::<f64>::zero()).matrix(),
            Matrix3::identity()
        );
        let r = exp_skew(&SkewLog::from_vector(Vector3::z() * (PI / 3.0)));
        let h = 3f64.sqrt() / 2.0;
        let expected = Matrix3::new(0.5, -h, 0.0, h, 0.5, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*r.matrix(), expected, epsilon = 1e-15);
        let (a, b) = (0.4, 1.1);
        let sum = exp_skew(&SkewLog::from_vector(Vector3::x() * a + Vector3::x() * b));
        let direct = Rotation::from_axis_angle(&Vector3::x(), a + b);
        assert_relative_eq!(*sum.matrix(), *direct.matrix(), epsilon = 1e-15);
    }

    #[test]
    fn axis_angle_examples() {
        let (w, t) = axis_angle(&Rotation::<f64>::identity()).unwrap();
        assert_eq!((w, t), (Vector3::x(), 0.0));
        let ry = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        let (w, t) = axis_angle(&Rotation::from_matrix(ry, 1e-12).unwrap()).unwrap();
        assert_relative_eq!(w, Vector3::y(), epsilon = 1e-15);
        assert_relative_eq!(t, FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn small_angle_series_is_continuous() {
        for &t in &[1e-9, 1e-6, 9.9e-5, 1.01e-4, 1e-3] {
            let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
            let r = exp_skew(&SkewLog::from_vector(axis * t));
            let l = log_rotation(&r).unwrap();
            assert_relative_eq!(*l.vector(), axis * t, epsilon = 1e-15);
            assert!((r.matrix().transpose() * r.matrix() - Matrix3::identity()).norm() < 1e-15);
        }
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let phi = Vector3::new(0.4, -0.7, 0.2);
        let jr = right_jacobian(&phi);
        let base = exp_skew(&SkewLog::from_vector(phi)).into_inner();
        let h = 1e-6;
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let plus = exp_skew(&SkewLog::from_vector(phi + d)).into_inner();
            let minus = exp_skew(&SkewLog::from_vector(phi - d)).into_inner();
            let fd = (plus - minus) / (2.0 * h);
            let analytic = base * skew(&(jr * Vector3::ith(k, 1.0)));
            assert_relative_eq!(fd, analytic, epsilon = 1e-8);
        }
    }
}
