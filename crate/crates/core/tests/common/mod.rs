#![allow(dead_code)]

use caricature_core::collection::FaceTemplate;
use caricature_core::rotation::{exp_skew, Rotation};
use caricature_core::{DeformBasis, SkewLog, TriangleMesh};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

pub fn small_template() -> FaceTemplate {
    FaceTemplate::with_grid(12, 16)
}

pub fn rotation_from(v: [f64; 3]) -> Rotation<f64> {
    exp_skew(&SkewLog::from_vector(Vector3::from(v)))
}

/// Rotation vectors with angle strictly below π.
pub fn rotation_vector(max_angle: f64) -> impl Strategy<Value = [f64; 3]> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.0..max_angle).prop_filter_map(
        "non-zero axis",
        |(x, y, z, a)| {
            let n = (x * x + y * y + z * z).sqrt();
            (n > 1e-3).then(|| [x / n * a, y / n * a, z / n * a])
        },
    )
}

pub fn sym_positive(entries: [f64; 6]) -> Matrix3<f64> {
    let [a, b, c, d, e, f] = entries;
    let m = Matrix3::new(a, b, c, b, d, e, c, e, f) * 0.3;
    Matrix3::identity() + m * m.transpose()
}

pub fn transform(mesh: &TriangleMesh<f64>, a: &Matrix3<f64>, t: Vector3<f64>) -> TriangleMesh<f64> {
    mesh.map_vertices(|v| a * v + t)
}

pub fn basis_from(
    reference: &TriangleMesh<f64>,
    examples: &[TriangleMesh<f64>],
) -> DeformBasis<f64> {
    DeformBasis::from_examples(reference.clone(), examples).unwrap()
}
