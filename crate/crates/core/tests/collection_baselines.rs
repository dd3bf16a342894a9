mod common;

use caricature_core::baselines::{
    build_linear_model, decode_linear_model, encode_linear_model, fit_linear, solve_alpha,
};
use caricature_core::collection::{
    front_camera, mean_shape, project_landmarks, rms_distance, select_diverse, synth_collection,
    RecipeSpec,
};
use caricature_core::projection::estimate_params;
use caricature_core::TriangleMesh;
use common::small_template;
use nalgebra::{DVector, Vector3};
use proptest::prelude::*;

fn shifted(m: &TriangleMesh<f64>, d: Vector3<f64>, name: &str) -> TriangleMesh<f64> {
    let mut out = m.map_vertices(|p| p + d);
    out.name = name.into();
    out
}

/// Smallest pairwise RMS distance within `set ∪ {reference}`.
fn spread(meshes: &[TriangleMesh<f64>], reference: &TriangleMesh<f64>, set: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in set.iter().enumerate() {
        best = best.min(rms_distance(&meshes[i], reference));
        for &j in &set[a + 1..] {
            best = best.min(rms_distance(&meshes[i], &meshes[j]));
        }
    }
    best
}

#[test]
fn selection_finds_one_per_planted_cluster() {
    let reference = small_template().mesh().clone();
    let centers = [
        Vector3::new(3.0, 0.0, 0.0),
        Vector3::new(0.0, 3.0, 0.0),
        Vector3::new(-2.0, -2.0, 1.0),
    ];
    let mut meshes = Vec::new();
    let mut cluster = Vec::new();
    for k in 0..8 {
        let c = k % 3;
        let jitter = Vector3::new(
            0.05 * (k as f64).sin(),
            0.04 * (k as f64).cos(),
            0.03 * k as f64 / 8.0,
        );
        meshes.push(shifted(&reference, centers[c] + jitter, "m"));
        cluster.push(c);
    }
    for k in 1..=3 {
        let picked = select_diverse(&meshes, &reference, k).unwrap();
        let mut seen: Vec<usize> = picked.iter().map(|&i| cluster[i]).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), k, "clusters repeated in {picked:?}");
        let mut optimum = 0.0f64;
        let n = meshes.len();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            optimum = optimum.max(spread(&meshes, &reference, &set));
        }
        let got = spread(&meshes, &reference, &picked);
        assert!(
            got >= 0.9 * optimum,
            "k {k}: greedy {got} vs exhaustive {optimum}"
        );
    }
}

#[test]
fn full_selection_has_non_increasing_gaps() {
    let tpl = small_template();
    let meshes: Vec<_> = synth_collection(&tpl, 9, &vec![RecipeSpec::RandomIdentity; 7])
        .unwrap()
        .into_iter()
        .map(|e| e.mesh)
        .collect();
    let picked = select_diverse(&meshes, tpl.mesh(), meshes.len()).unwrap();
    let mut sorted = picked.clone();
    sorted.sort();
    assert_eq!(sorted, (0..meshes.len()).collect::<Vec<_>>());
    let mut gaps = Vec::new();
    for (a, &i) in picked.iter().enumerate() {
        let mut d = rms_distance(&meshes[i], tpl.mesh());
        for &j in &picked[..a] {
            d = d.min(rms_distance(&meshes[i], &meshes[j]));
        }
        gaps.push(d);
    }
    assert!(gaps.windows(2).all(|p| p[1] <= p[0] + 1e-15), "{gaps:?}");
}

#[test]
fn selection_of_a_distinct_mesh() {
    let reference = small_template().mesh().clone();
    let meshes = vec![
        reference.clone(),
        shifted(&reference, Vector3::new(0.0, 0.0, 0.5), "d"),
    ];
    assert_eq!(select_diverse(&meshes, &reference, 1).unwrap(), vec![1]);
    assert!(select_diverse(&meshes, &reference, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mean_commutes_with_scaling(s in 0.1..10.0f64, seed in 0u64..1000) {
        let tpl = small_template();
        let meshes: Vec<_> = synth_collection(&tpl, seed, &vec![RecipeSpec::RandomExpression; 3]).unwrap().into_iter().map(|e| e.mesh).collect();
        let scaled: Vec<_> = meshes.iter().map(|m| m.map_vertices(|p| p * s)).collect();
        let a = mean_shape(&meshes).unwrap().map_vertices(|p| p * s);
        let b = mean_shape(&scaled).unwrap();
        prop_assert!(a.max_vertex_distance(&b) <= 1e-12 * s.max(1.0));
        let direct: Vec<Vector3<f64>> = (0..tpl.mesh().num_vertices())
            .map(|i| meshes.iter().map(|m| m.vertices()[i]).sum::<Vector3<f64>>() / 3.0)
            .collect();
        let mean = mean_shape(&meshes).unwrap();
        for (p, q) in mean.vertices().iter().zip(&direct) {
            prop_assert!((p - q).norm() <= 1e-14);
        }
    }

    #[test]
    fn camera_is_recovered(scale in 100.0..300.0f64, pitch in -0.2..0.2f64, yaw in -0.4..0.4f64, roll in -0.2..0.2f64) {
        let tpl = landmark_template();
        let cam = front_camera::<f64>(scale, pitch, yaw, roll);
        let lms = project_landmarks(tpl.mesh(), tpl.landmarks(), &cam).unwrap();
        let est = estimate_params(tpl.mesh(), &lms).unwrap();
        prop_assert!((est.scale - scale).abs() <= 1e-8 * scale);
        prop_assert!((est.rotation_matrix() - cam.rotation_matrix()).abs().max() <= 1e-9);
        prop_assert!((est.translation - cam.translation).norm() <= 1e-7);
    }
}

/// Fine enough for 68 distinct landmark vertices.
fn landmark_template() -> caricature_core::collection::FaceTemplate {
    caricature_core::collection::FaceTemplate::with_grid(24, 30)
}

#[test]
fn planted_mode_is_found() {
    let reference = small_template().mesh().clone();
    let n = reference.num_vertices();
    let pattern: Vec<Vector3<f64>> = (0..n)
        .map(|i| Vector3::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.5))
        .collect();
    let norm = pattern.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    let coeffs = [-2.0, -0.5, 0.0, 1.0, 1.5];
    let meshes: Vec<_> = coeffs
        .iter()
        .map(|&a| {
            let verts = reference
                .vertices()
                .iter()
                .zip(&pattern)
                .map(|(p, d)| p + d * (a / norm))
                .collect();
            reference.with_vertices(verts, "planted").unwrap()
        })
        .collect();
    let model = build_linear_model(&meshes, 1.0).unwrap();
    assert_eq!(model.num_modes(), 1);
    let axis = model.axes.column(0);
    let dot: f64 = pattern
        .iter()
        .enumerate()
        .map(|(i, d)| d.x * axis[3 * i] + d.y * axis[3 * i + 1] + d.z * axis[3 * i + 2])
        .sum::<f64>()
        / norm;
    assert!((dot.abs() - 1.0).abs() < 1e-10, "cosine {dot}");
    let mean_c = coeffs.iter().sum::<f64>() / 5.0;
    let var = coeffs.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / 4.0;
    assert!((model.sigma[0] - var.sqrt()).abs() < 1e-10);
    let round = model.instance(&model.project(&meshes[4]).unwrap()).unwrap();
    assert!(round.max_vertex_distance(&meshes[4]) < 1e-10);
    let decoded =
        decode_linear_model::<f64>(&encode_linear_model(&model), std::path::Path::new("mem"))
            .unwrap();
    assert_eq!(decoded.axes, model.axes);
    assert_eq!(decoded.sigma, model.sigma);
}

#[test]
fn regularization_pulls_toward_the_mean() {
    let tpl = landmark_template();
    let meshes: Vec<_> = synth_collection(&tpl, 3, &vec![RecipeSpec::RandomIdentity; 6])
        .unwrap()
        .into_iter()
        .map(|e| e.mesh)
        .collect();
    let model = build_linear_model(&meshes, 1.0).unwrap();
    let cam = front_camera::<f64>(200.0, 0.05, 0.1, 0.0);
    let lms = project_landmarks(&meshes[2], tpl.landmarks(), &cam).unwrap();
    let mut last_norm = f64::INFINITY;
    let mut last_err = 0.0;
    for lam in [0.0, 1.0, 10.0, 100.0, 1000.0] {
        let alpha = solve_alpha(&model, &lms, &cam, lam).unwrap();
        let scaled = DVector::from_iterator(
            alpha.len(),
            alpha.iter().zip(&model.sigma).map(|(a, s)| a / s),
        );
        assert!(scaled.norm() <= last_norm + 1e-9, "λ {lam}");
        last_norm = scaled.norm();
        let fit = fit_linear(&model, &lms, lam).unwrap();
        assert!(
            fit.e_error + 1e-9 >= last_err,
            "λ {lam}: error fell from {last_err} to {}",
            fit.e_error
        );
        last_err = fit.e_error;
    }
}
