use caricature_core::baselines::{build_linear_model, fit_linear};
use caricature_core::collection::{
    build_basis, front_camera, jaw_hinge, project_landmarks, synth_collection, FaceTemplate,
    RecipeSpec,
};
use caricature_core::pipeline::{render_overlay, AnchorPolicy};
use caricature_core::projection::landmark_loss;
use caricature_core::{
    energy_def, fit_caricature, reconstruct_from_weights, solve_p_step, Anchor, BlendWeights,
    DeformBasis, FitConfig, TriangleMesh,
};
use nalgebra::Vector3;

fn template() -> FaceTemplate {
    FaceTemplate::with_grid(24, 30)
}

fn small_basis(tpl: &FaceTemplate) -> DeformBasis<f64> {
    let mut specs = vec![RecipeSpec::Fixed(jaw_hinge(tpl, 15.0))];
    specs.extend(vec![RecipeSpec::RandomExpression; 3]);
    specs.extend(vec![RecipeSpec::RandomIdentity; 2]);
    let ex: Vec<TriangleMesh<f64>> = synth_collection(tpl, 21, &specs)
        .unwrap()
        .into_iter()
        .map(|e| e.mesh)
        .collect();
    build_basis(tpl.mesh(), &ex).unwrap()
}

#[test]
fn in_span_target_is_fit() {
    let tpl = template();
    let basis = small_basis(&tpl);
    let w_star = BlendWeights {
        w_r: vec![0.8, 0.3, 0.0, 0.5, 0.6, 0.2],
        w_s: vec![0.7, 0.4, 0.1, 0.5, 0.6, 0.3],
    };
    let target = reconstruct_from_weights(
        &basis,
        &w_star,
        Anchor::at_vertex(&basis.reference, tpl.nose_tip()),
    )
    .unwrap();
    let lms = project_landmarks(
        &target,
        tpl.landmarks(),
        &front_camera(200.0, 0.05, 0.1, 0.02),
    )
    .unwrap();
    let res = fit_caricature(&basis, &lms, &FitConfig::default()).unwrap();
    assert!(res.e_error <= 0.1, "E_error {}", res.e_error);
    let star = energy_def(&basis, &w_star, &target).unwrap();
    let fitted = energy_def(&basis, &res.weights, &res.mesh).unwrap();
    assert!(fitted <= 1.1 * star, "E_def {fitted} vs {star} at w*");
}

#[test]
fn extrapolated_hinge_beats_the_linear_model() {
    let tpl = template();
    let basis = small_basis(&tpl);
    let target = tpl
        .apply(tpl.mesh(), &jaw_hinge(&tpl, 30.0), "hinge30")
        .unwrap();
    let lms = project_landmarks(
        &target,
        tpl.landmarks(),
        &front_camera(200.0, 0.0, 0.0, 0.0),
    )
    .unwrap();
    let res = fit_caricature(&basis, &lms, &FitConfig::default()).unwrap();
    let face_box = lms.points_bbox_diagonal();
    assert!(
        res.e_error <= 0.01 * face_box,
        "E_error {} of box {face_box}",
        res.e_error
    );
    let all: Vec<usize> = (0..basis.num_vertices()).collect();
    let mut train: Vec<TriangleMesh<f64>> =
        synth_collection(&tpl, 21, &[RecipeSpec::Fixed(jaw_hinge(&tpl, 15.0))])
            .unwrap()
            .into_iter()
            .map(|e| {
                caricature_core::deform::align_rigid(&basis.reference, &e.mesh, &all)
                    .unwrap()
                    .mesh
            })
            .collect();
    train.push(basis.reference.clone());
    let model = build_linear_model(&train, 1.0).unwrap();
    let lin = fit_linear(&model, &lms, 1e3).unwrap();
    assert!(
        lin.e_error > res.e_error,
        "linear {} vs ours {}",
        lin.e_error,
        res.e_error
    );
}

#[test]
fn fits_are_deterministic_and_traces_consistent() {
    let tpl = template();
    let basis = small_basis(&tpl);
    let target = tpl
        .apply(tpl.mesh(), &jaw_hinge(&tpl, 25.0), "hinge25")
        .unwrap();
    let lms = project_landmarks(
        &target,
        tpl.landmarks(),
        &front_camera(190.0, 0.05, -0.1, 0.0),
    )
    .unwrap();
    let cfg = FitConfig {
        epsilon: 0.0,
        ..FitConfig::default()
    };
    let a = fit_caricature(&basis, &lms, &cfg).unwrap();
    let b = fit_caricature(&basis, &lms, &cfg).unwrap();
    assert_eq!(a, b);
    let da = serde_json::to_string(&a.to_document(&lms)).unwrap();
    let db = serde_json::to_string(&b.to_document(&lms)).unwrap();
    assert_eq!(da, db);

    assert_eq!(a.iterations.len(), 4);
    for rec in &a.iterations {
        if let Some(after) = rec.e_def_after_w {
            assert!(
                after <= rec.e_def * (1.0 + 1e-12),
                "w-step raised E_def: {} -> {after}",
                rec.e_def
            );
        }
        assert!(
            (rec.e_error - caricature_core::projection::fitting_error(rec.e_lan)).abs()
                <= 1e-12 * rec.e_error.max(1.0)
        );
    }
    assert!(a.iterations.last().unwrap().e_def_after_w.is_none());
    assert!((a.e_error - caricature_core::projection::fitting_error(a.e_lan)).abs() <= 1e-12);
    let csv = a.energy_trace_csv();
    assert_eq!(csv.lines().count(), 1 + a.iterations.len());
}

#[test]
fn p_step_minimizes_the_joint_objective() {
    let tpl = template();
    let basis = small_basis(&tpl);
    let target = tpl
        .apply(tpl.mesh(), &jaw_hinge(&tpl, 25.0), "hinge25")
        .unwrap();
    let cam = front_camera(200.0, 0.0, 0.1, 0.0);
    let lms = project_landmarks(&target, tpl.landmarks(), &cam).unwrap();
    let w = BlendWeights::one_hot(basis.len(), 0);
    let lambda = 0.01;
    let joint = |m: &TriangleMesh<f64>| {
        energy_def(&basis, &w, m).unwrap() + lambda * landmark_loss(&cam, m, &lms)
    };
    let anchor = Anchor::at_vertex(
        &basis.reference,
        AnchorPolicy::Centroid.resolve(&basis.reference).unwrap(),
    );
    let p = solve_p_step(&basis, &w, &cam, &lms, lambda, anchor).unwrap();
    let best = joint(&p);
    for (k, other) in [basis.reference.clone(), target.clone()].iter().enumerate() {
        assert!(best < joint(other), "candidate {k}");
    }
    for k in 0..6 {
        let d = Vector3::new(0.0, 0.0, 1e-3 * (k as f64 + 1.0));
        let i = tpl.landmarks()[k * 7];
        let mut verts = p.vertices().to_vec();
        verts[i] += d;
        let nudged = p.with_vertices(verts, "nudged").unwrap();
        assert!(best < joint(&nudged));
    }
}

#[test]
fn single_precision_fit_runs() {
    let tpl = template();
    let basis: DeformBasis<f32> = {
        let ex: Vec<TriangleMesh<f32>> =
            synth_collection(&tpl, 21, &[RecipeSpec::Fixed(jaw_hinge(&tpl, 15.0))])
                .unwrap()
                .into_iter()
                .map(|e| e.mesh.cast())
                .collect();
        build_basis(&tpl.mesh_as::<f32>(), &ex).unwrap()
    };
    let target = tpl
        .apply(tpl.mesh(), &jaw_hinge(&tpl, 30.0), "hinge30")
        .unwrap()
        .cast::<f32>();
    let lms = project_landmarks(
        &target,
        tpl.landmarks(),
        &front_camera(200.0, 0.0, 0.0, 0.0),
    )
    .unwrap();
    let res = fit_caricature(&basis, &lms, &FitConfig::default()).unwrap();
    assert!(res.e_error.is_finite());
    assert!(res.e_error < 2.0, "f32 E_error {}", res.e_error);
}

#[test]
fn overlay_files_are_reproducible() {
    let tpl = template();
    let basis = small_basis(&tpl);
    let lms = project_landmarks(
        &basis.reference,
        tpl.landmarks(),
        &front_camera(200.0, 0.0, 0.0, 0.0),
    )
    .unwrap();
    let res = fit_caricature(&basis, &lms, &FitConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bg = dir.path().join("bg.png");
    caricature_core::pipeline::blank_canvas(512, 512)
        .save(&bg)
        .unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    render_overlay(&res, &lms, &bg, &a).unwrap();
    render_overlay(&res, &lms, &bg, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let offsets = res
        .reprojected(&lms)
        .iter()
        .zip(&lms.points)
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max);
    assert!(offsets <= 1.0);
    assert!(render_overlay(&res, &lms, &dir.path().join("missing.png"), &a).is_err());
}
