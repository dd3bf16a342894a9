//! Per-vertex deformation representation `{log Rᵢ, Sᵢ − I}`, deformation bases, blending
//! and rigid pre-alignment.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{cotangent_weights, EdgeWeights, TriangleMesh};
use crate::rotation::{exp_skew, log_rotation, polar_decompose, Rotation, SkewLog};
use crate::scalar::Real;

/// Relative Tikhonov floor `δ = GRAM_FLOOR · trace` for ill-conditioned 1-ring Gram matrices.
pub const GRAM_FLOOR: f64 = 1e-9;
/// The floor is applied only when the smallest Gram eigenvalue is below this fraction of the trace.
pub const GRAM_CONDITION: f64 = 1e-6;

/// Rotation logarithm and scale/shear offset of one vertex.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VertexDeform<T: Real> {
    pub log_r: SkewLog<T>,
    /// `S − I`, symmetric.
    pub s_prime: Matrix3<T>,
}

impl<T: Real> VertexDeform<T> {
    /// The gradient `exp(log R)·(I + S′)` this record encodes.
    pub fn gradient(&self) -> Matrix3<T> {
        exp_skew(&self.log_r).into_inner() * (Matrix3::identity() + self.s_prime)
    }

    pub fn is_zero(&self, tol: T) -> bool {
        self.log_r.vector().norm() <= tol && self.s_prime.norm() <= tol
    }
}

/// Deformation of one example relative to the reference, one record per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformRep<T: Real>(pub Vec<VertexDeform<T>>);

impl<T: Real> DeformRep<T> {
    pub fn zero(n: usize) -> Self {
        Self(vec![VertexDeform::default(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest component magnitude across all vertices.
    pub fn max_abs(&self) -> T {
        self.0.iter().fold(T::zero(), |m, d| {
            let a = d.log_r.vector().amax().max(d.s_prime.amax());
            if a > m {
                a
            } else {
                m
            }
        })
    }
}

/// Reference mesh, its edge weights, and `n` example representations.
#[derive(Debug, Clone)]
pub struct DeformBasis<T: Real> {
    pub reference: TriangleMesh<T>,
    pub weights: EdgeWeights<T>,
    pub reps: Vec<DeformRep<T>>,
    pub labels: Vec<String>,
}

impl<T: Real> DeformBasis<T> {
    pub fn new(
        reference: TriangleMesh<T>,
        weights: EdgeWeights<T>,
        reps: Vec<DeformRep<T>>,
        labels: Vec<String>,
    ) -> Result<Self> {
        if reps.is_empty() {
            return Err(Error::InvalidArgument(
                "basis needs at least one example".into(),
            ));
        }
        if labels.len() != reps.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} examples",
                labels.len(),
                reps.len()
            )));
        }
        if let Some(r) = reps.iter().find(|r| r.len() != reference.num_vertices()) {
            return Err(Error::TopologyMismatch(format!(
                "representation has {} vertices, reference has {}",
                r.len(),
                reference.num_vertices()
            )));
        }
        Ok(Self {
            reference,
            weights,
            reps,
            labels,
        })
    }

    /// Extracts every example against `reference`.
    pub fn from_examples(reference: TriangleMesh<T>, examples: &[TriangleMesh<T>]) -> Result<Self> {
        let weights = cotangent_weights(&reference)?;
        let reps = examples
            .iter()
            .map(|m| extract_rep(&reference, m, &weights))
            .collect::<Result<Vec<_>>>()?;
        let labels = examples.iter().map(|m| m.name.clone()).collect();
        Self::new(reference, weights, reps, labels)
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn num_vertices(&self) -> usize {
        self.reference.num_vertices()
    }

    /// Restricts the basis to the given example indices.
    pub fn subset(&self, examples: &[usize]) -> Result<Self> {
        let reps = examples.iter().map(|&l| self.reps[l].clone()).collect();
        let labels = examples.iter().map(|&l| self.labels[l].clone()).collect();
        Self::new(self.reference.clone(), self.weights.clone(), reps, labels)
    }

    pub(crate) fn check_weights(&self, w: &BlendWeights<T>) -> Result<()> {
        for got in [w.w_r.len(), w.w_s.len()] {
            if got != self.len() {
                return Err(Error::WeightCount {
                    got,
                    expected: self.len(),
                });
            }
        }
        Ok(())
    }
}

/// Rotation and scale/shear blend weights. Unbounded: values outside [0, 1] extrapolate.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights<T: Real> {
    pub w_r: Vec<T>,
    pub w_s: Vec<T>,
}

impl<T: Real> BlendWeights<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            w_r: vec![T::zero(); n],
            w_s: vec![T::zero(); n],
        }
    }

    pub fn one_hot(n: usize, l: usize) -> Self {
        let mut w = Self::zeros(n);
        w.w_r[l] = T::one();
        w.w_s[l] = T::one();
        w
    }

    /// `w_R = w_S = w`.
    pub fn tied(w: &[T]) -> Self {
        Self {
            w_r: w.to_vec(),
            w_s: w.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.w_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_r.is_empty()
    }

    /// `[w_R..., w_S...]`.
    pub fn to_flat(&self) -> Vec<T> {
        self.w_r.iter().chain(self.w_s.iter()).copied().collect()
    }

    pub fn from_flat(flat: &[T]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "flat weight vector has odd length {}",
                flat.len()
            )));
        }
        let n = flat.len() / 2;
        Ok(Self {
            w_r: flat[..n].to_vec(),
            w_s: flat[n..].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.w_r
            .iter()
            .chain(self.w_s.iter())
            .all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .fold(T::zero(), |m, (a, b)| m.max((*a - b).abs()))
    }

    /// Whitespace-separated `w_R` then `w_S`.
    pub fn to_text(&self) -> String {
        let parts: Vec<String> = self
            .to_flat()
            .iter()
            .map(|x| format!("{:.17e}", x.as_f64()))
            .collect();
        let n = self.len();
        format!("{}\n{}\n", parts[..n].join(" "), parts[n..].join(" "))
    }
}

/// Weighted 1-ring Gram matrix `Σⱼ cᵢⱼ eᵢⱼ eᵢⱼᵀ` of the reference.
pub fn ring_gram<T: Real>(
    reference: &TriangleMesh<T>,
    weights: &EdgeWeights<T>,
    i: usize,
) -> Matrix3<T> {
    let p = reference.vertices();
    let mut g = Matrix3::zeros();
    for (&j, &c) in reference.topology().neighbors(i).iter().zip(weights.row(i)) {
        let e = p[i] - p[j];
        g += e * e.transpose() * c;
    }
    g
}

/// Closed-form minimizer of `Σⱼ cᵢⱼ ‖e′ᵢⱼ − T eᵢⱼ‖²`; nearly flat or low-valence rings get a
/// Tikhonov floor on the Gram matrix.
pub fn extract_gradient<T: Real>(
    reference: &TriangleMesh<T>,
    deformed: &TriangleMesh<T>,
    weights: &EdgeWeights<T>,
    i: usize,
) -> Result<Matrix3<T>> {
    if i >= reference.num_vertices() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: reference.num_vertices(),
        });
    }
    let p = reference.vertices();
    let q = deformed.vertices();
    let mut g = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (&j, &c) in reference.topology().neighbors(i).iter().zip(weights.row(i)) {
        let e = p[i] - p[j];
        let e2 = q[i] - q[j];
        g += e * e.transpose() * c;
        h += e2 * e.transpose() * c;
    }
    let tr = g.trace();
    if !(tr > T::zero()) {
        return Err(Error::DegenerateRing { vertex: i });
    }
    let reg = if g.symmetric_eigenvalues().min() < T::lit(GRAM_CONDITION) * tr {
        g + Matrix3::identity() * (T::lit(GRAM_FLOOR) * tr)
    } else {
        g
    };
    let inv = reg
        .try_inverse()
        .ok_or(Error::DegenerateRing { vertex: i })?;
    let t = h * inv;
    if t.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateRing { vertex: i });
    }
    Ok(t)
}

/// Representation of `deformed` relative to `reference`.
pub fn extract_rep<T: Real>(
    reference: &TriangleMesh<T>,
    deformed: &TriangleMesh<T>,
    weights: &EdgeWeights<T>,
) -> Result<DeformRep<T>> {
    reference.ensure_same_topology(deformed)?;
    let recs = (0..reference.num_vertices())
        .into_par_iter()
        .map(|i| {
            let t = extract_gradient(reference, deformed, weights, i)?;
            let (r, s) = polar_decompose(&t)?;
            Ok(VertexDeform {
                log_r: log_rotation(&r)?,
                s_prime: s.into_inner() - Matrix3::identity(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeformRep(recs))
}

/// Blended rotation log `Σₗ w_R,ₗ log R_ₗ,ᵢ` and scale/shear `I + Σₗ w_S,ₗ S′ₗ,ᵢ` at vertex `i`.
pub fn blend_parts<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
    i: usize,
) -> (Vector3<T>, Matrix3<T>) {
    let mut phi = Vector3::zeros();
    let mut s = Matrix3::identity();
    for (l, rep) in basis.reps.iter().enumerate() {
        let d = &rep.0[i];
        let (wr, ws) = (w.w_r[l], w.w_s[l]);
        if wr != T::zero() {
            phi += d.log_r.vector() * wr;
        }
        if ws != T::zero() {
            s += d.s_prime * ws;
        }
    }
    (phi, s)
}

/// `Tᵢ(w) = exp(Σ w_R log R)·(I + Σ w_S S′)`.
pub fn blend_gradient<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
    i: usize,
) -> Matrix3<T> {
    let (phi, s) = blend_parts(basis, w, i);
    exp_skew(&SkewLog::from_vector(phi)).into_inner() * s
}

/// Blended gradients at every vertex.
pub fn blend_gradients<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
) -> Result<Vec<Matrix3<T>>> {
    basis.check_weights(w)?;
    Ok((0..basis.num_vertices())
        .into_par_iter()
        .map(|i| blend_gradient(basis, w, i))
        .collect())
}

/// Result of a rigid landmark alignment: `aligned = rotation · model + translation`.
#[derive(Debug, Clone)]
pub struct RigidAlignment<T: Real> {
    pub rotation: Rotation<T>,
    pub translation: Vector3<T>,
    pub mesh: TriangleMesh<T>,
    /// Summed squared landmark distance after alignment.
    pub residual: T,
}

/// Rotation + translation (no scale) moving `model` onto `reference` at the landmark vertices.
pub fn align_rigid<T: Real>(
    reference: &TriangleMesh<T>,
    model: &TriangleMesh<T>,
    landmarks: &[usize],
) -> Result<RigidAlignment<T>> {
    reference.ensure_same_topology(model)?;
    if landmarks.len() < 3 {
        return Err(Error::DegenerateLandmarks);
    }
    for &k in landmarks {
        if k >= reference.num_vertices() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: reference.num_vertices(),
            });
        }
    }
    let src: Vec<Vector3<T>> = landmarks.iter().map(|&k| model.vertices()[k]).collect();
    let dst: Vec<Vector3<T>> = landmarks.iter().map(|&k| reference.vertices()[k]).collect();
    let (rotation, translation) = procrustes(&src, &dst)?;
    let r = *rotation.matrix();
    let mesh = model.map_vertices(|v| r * v + translation);
    let residual = landmarks
        .iter()
        .map(|&k| (mesh.vertices()[k] - reference.vertices()[k]).norm_squared())
        .fold(T::zero(), |a, b| a + b);
    Ok(RigidAlignment {
        rotation,
        translation,
        mesh,
        residual,
    })
}

/// Least-squares rigid transform taking `src` onto `dst` (Kabsch).
pub fn procrustes<T: Real>(
    src: &[Vector3<T>],
    dst: &[Vector3<T>],
) -> Result<(Rotation<T>, Vector3<T>)> {
    let n = T::from_count(src.len());
    let cs = src.iter().fold(Vector3::zeros(), |a, b| a + b) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, b| a + b) / n;
    let mut cov = Matrix3::zeros();
    let mut spread_src = Matrix3::zeros();
    let mut spread_dst = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (a - cs, b - cd);
        cov += da * db.transpose();
        spread_src += da * da.transpose();
        spread_dst += db * db.transpose();
    }
    for spread in [spread_src, spread_dst] {
        let ev = spread.symmetric_eigenvalues();
        let mut sorted: Vec<T> = ev.iter().copied().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        if !(sorted[0] > T::zero()) || sorted[1] <= T::lit(1e-12) * sorted[0] {
            return Err(Error::DegenerateLandmarks);
        }
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("u");
    let v = svd.v_t.expect("v_t").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    let r = v * d * u.transpose();
    let t = cd - r * cs;
    Ok((Rotation::from_matrix_unchecked(r), t))
}
