mod common;

use caricature_core::deform::blend_gradients;
use caricature_core::deform::{align_rigid, extract_gradient, procrustes};
use caricature_core::mesh::{bbox_diagonal, cotangent_weights};
use caricature_core::reconstruction::normal_equation_residual;
use caricature_core::{reconstruct_from_weights, Anchor, BlendWeights, TriangleMesh};
use common::{basis_from, rotation_from, rotation_vector, small_template, sym_positive, transform};
use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;

/// Horn's closed-form absolute orientation via the 4×4 quaternion eigenproblem.
fn horn(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut m = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        m += (a - cs) * (b - cd).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let k = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = k.symmetric_eigen();
    let best = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(best);
    let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner();
    (r, cd - r * cs)
}

fn permuted(mesh: &TriangleMesh<f64>, perm: &[usize]) -> TriangleMesh<f64> {
    // perm[old] = new
    let mut verts = vec![Vector3::zeros(); mesh.num_vertices()];
    for (old, v) in mesh.vertices().iter().enumerate() {
        verts[perm[old]] = *v;
    }
    let faces = mesh
        .faces()
        .iter()
        .map(|f| [perm[f[0]], perm[f[1]], perm[f[2]]])
        .collect();
    TriangleMesh::new(verts, faces, "permuted").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn procrustes_matches_horn(v in rotation_vector(3.0), t in proptest::array::uniform3(-2.0..2.0f64), noise in proptest::collection::vec(-0.05..0.05f64, 30)) {
        let r = rotation_from(v);
        let src: Vec<Vector3<f64>> = (0..10).map(|k| {
            let k = k as f64;
            Vector3::new((k * 1.3).sin(), (k * 0.7).cos() * 1.5, k * 0.2 - 1.0)
        }).collect();
        let dst: Vec<Vector3<f64>> = src.iter().enumerate()
            .map(|(k, p)| r.matrix() * p + Vector3::from(t) + Vector3::new(noise[3 * k], noise[3 * k + 1], noise[3 * k + 2]))
            .collect();
        let (rot, tr) = procrustes(&src, &dst).unwrap();
        let (rh, th) = horn(&src, &dst);
        prop_assert!((rot.matrix() - rh).abs().max() <= 1e-9);
        prop_assert!((tr - th).norm() <= 1e-9);
    }

    #[test]
    fn cotangent_weights_ignore_similarity(v in rotation_vector(3.0), s in 0.2..5.0f64, t in proptest::array::uniform3(-3.0..3.0f64)) {
        let mesh = small_template().mesh().clone();
        let moved = transform(&mesh, &(rotation_from(v).matrix() * s), Vector3::from(t));
        let a = cotangent_weights(&mesh).unwrap();
        let b = cotangent_weights(&moved).unwrap();
        for ((e, wa), (_, wb)) in a.iter().zip(b.iter()) {
            prop_assert!((wa - wb).abs() <= 1e-9 * wa.abs().max(1.0), "edge {:?}", e);
        }
    }

    #[test]
    fn cotangent_weights_follow_relabeling(seed in any::<u64>()) {
        let mesh = small_template().mesh().clone();
        let n = mesh.num_vertices();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = cotangent_weights(&mesh).unwrap();
        let b = cotangent_weights(&permuted(&mesh, &perm)).unwrap();
        for ((i, j), w) in a.iter() {
            let other = b.get(perm[i], perm[j]).unwrap();
            prop_assert!((w - other).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn extraction_recovers_affine_maps(s in proptest::array::uniform6(-1.0..1.0f64), v in rotation_vector(2.5), t in proptest::array::uniform3(-1.0..1.0f64)) {
        let mesh = small_template().mesh().clone();
        let a = rotation_from(v).matrix() * sym_positive(s);
        let moved = transform(&mesh, &a, Vector3::from(t));
        let w = cotangent_weights(&mesh).unwrap();
        for i in (0..mesh.num_vertices()).step_by(7) {
            let g = extract_gradient(&mesh, &moved, &w, i).unwrap();
            prop_assert!((g - a).abs().max() <= 1e-8 * a.norm());
        }
    }

    #[test]
    fn affine_examples_round_trip(s in proptest::array::uniform6(-1.0..1.0f64), v in rotation_vector(2.5)) {
        let mesh = small_template().mesh().clone();
        let a = rotation_from(v).matrix() * sym_positive(s);
        let example = transform(&mesh, &a, Vector3::zeros());
        let basis = basis_from(&mesh, std::slice::from_ref(&example));
        let anchor = 5;
        let out = reconstruct_from_weights(&basis, &BlendWeights::one_hot(1, 0), Anchor::at_vertex(&example, anchor)).unwrap();
        prop_assert!(out.max_vertex_distance(&example) <= 1e-8 * bbox_diagonal(&example));
    }

    #[test]
    fn anchor_choice_is_a_translation(w in proptest::collection::vec(-1.5..2.5f64, 4), a in 0usize..193, b in 0usize..193, t in proptest::array::uniform3(-1.0..1.0f64)) {
        let tpl = small_template();
        let mesh = tpl.mesh().clone();
        let ex = vec![
            tpl.apply(&mesh, &caricature_core::collection::jaw_hinge(&tpl, 15.0), "hinge").unwrap(),
            mesh.map_vertices(|p| Vector3::new(p.x * 1.2, p.y, p.z * 0.9)),
        ];
        let basis = basis_from(&mesh, &ex);
        let weights = BlendWeights { w_r: vec![w[0], w[1]], w_s: vec![w[2], w[3]] };
        let pa = reconstruct_from_weights(&basis, &weights, Anchor::at_vertex(&mesh, a)).unwrap();
        let pb = reconstruct_from_weights(&basis, &weights, Anchor { vertex: b, position: mesh.vertices()[b] + Vector3::from(t) }).unwrap();
        let shift = pb.vertices()[0] - pa.vertices()[0];
        let worst = pa.vertices().iter().zip(pb.vertices()).map(|(p, q)| (q - p - shift).norm()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-8 * bbox_diagonal(&pa), "worst {worst}");
    }

    #[test]
    fn reconstruction_solves_normal_equations(w in proptest::collection::vec(-1.0..2.0f64, 2)) {
        let tpl = small_template();
        let mesh = tpl.mesh().clone();
        let ex = vec![tpl.apply(&mesh, &caricature_core::collection::jaw_hinge(&tpl, 25.0), "hinge").unwrap()];
        let basis = basis_from(&mesh, &ex);
        let weights = BlendWeights { w_r: vec![w[0]], w_s: vec![w[1]] };
        let out = reconstruct_from_weights(&basis, &weights, Anchor::at_vertex(&mesh, 0)).unwrap();
        let grads = blend_gradients(&basis, &weights).unwrap();
        prop_assert!(normal_equation_residual(&mesh, &basis.weights, &grads, out.vertices(), 0) <= 1e-9);
    }

    #[test]
    fn alignment_removes_rigid_motion(v in rotation_vector(3.0), t in proptest::array::uniform3(-3.0..3.0f64)) {
        let tpl = small_template();
        let mesh = tpl.mesh().clone();
        let ex = tpl.apply(&mesh, &caricature_core::collection::jaw_hinge(&tpl, 10.0), "hinge").unwrap();
        let moved = transform(&ex, rotation_from(v).matrix(), Vector3::from(t));
        let all: Vec<usize> = (0..mesh.num_vertices()).collect();
        let direct = caricature_core::collection::build_basis(&mesh, &[ex]).unwrap();
        let aligned = caricature_core::collection::build_basis(&mesh, std::slice::from_ref(&moved)).unwrap();
        for (p, q) in direct.reps[0].0.iter().zip(&aligned.reps[0].0) {
            prop_assert!((p.log_r.vector() - q.log_r.vector()).norm() <= 1e-8);
            prop_assert!((p.s_prime - q.s_prime).abs().max() <= 1e-8);
        }
        prop_assert!(align_rigid(&mesh, &moved, &all).unwrap().residual.is_finite());
    }
}

#[test]
fn zero_weights_give_the_reference() {
    let tpl = small_template();
    let mesh = tpl.mesh().clone();
    let ex = vec![tpl
        .apply(
            &mesh,
            &caricature_core::collection::jaw_hinge(&tpl, 30.0),
            "hinge",
        )
        .unwrap()];
    let basis = basis_from(&mesh, &ex);
    let out = reconstruct_from_weights(
        &basis,
        &BlendWeights::zeros(1),
        Anchor::at_vertex(&mesh, 17),
    )
    .unwrap();
    assert!(out.max_vertex_distance(&mesh) <= 1e-10 * bbox_diagonal(&mesh));
}
