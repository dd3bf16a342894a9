use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use caricature_core::collection::{
    build_basis, front_camera, project_landmarks, synth_collection, FaceTemplate, RecipeSpec,
};
use caricature_core::io::LandmarkDocument;
use caricature_core::pipeline::{blank_canvas, encode_png, FitConfig};
use caricature_core::{DeformBasis, LANDMARK_COUNT};
use caricature_service::{router, AppState, ResultEnvelope, SessionDocument, SessionStatus};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture() -> (DeformBasis<f64>, LandmarkDocument) {
    let template = FaceTemplate::with_grid(24, 30);
    let specs = vec![RecipeSpec::RandomExpression; 4];
    let examples: Vec<_> = synth_collection(&template, 5, &specs)
        .unwrap()
        .into_iter()
        .map(|e| e.mesh)
        .collect();
    let basis = build_basis(template.mesh(), &examples).unwrap();
    assert_eq!(template.landmarks().len(), LANDMARK_COUNT);
    let lms = project_landmarks(
        &basis.reference,
        template.landmarks(),
        &front_camera(200.0, 0.0, 0.0, 0.0),
    )
    .unwrap();
    (basis, lms.to_document())
}

struct Harness {
    app: Router,
    landmarks: LandmarkDocument,
    _dir: tempfile::TempDir,
}

fn harness_with(hook: Option<caricature_service::FitHook>) -> Harness {
    let (basis, landmarks) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut state = AppState::new(dir.path(), basis, FitConfig::default()).unwrap();
    if let Some(h) = hook {
        state = state.with_fit_hook(h);
    }
    Harness {
        app: router(state),
        landmarks,
        _dir: dir,
    }
}

fn png_base64() -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_png(&blank_canvas(64, 64)).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

async fn create(h: &Harness) -> SessionDocument {
    let (status, body) = call(
        &h.app,
        "POST",
        "/sessions",
        Some(json!({ "image_base64": png_base64(), "landmarks": h.landmarks })),
    )
    .await;
    assert_eq!(
        status,
        StatusCode::CREATED,
        "{}",
        String::from_utf8_lossy(&body)
    );
    serde_json::from_slice(&body).unwrap()
}

async fn wait_done(h: &Harness, id: &str) -> SessionDocument {
    for _ in 0..600 {
        let (_, body) = call(&h.app, "GET", &format!("/sessions/{id}"), None).await;
        let doc: SessionDocument = serde_json::from_slice(&body).unwrap();
        if doc.status != SessionStatus::Fitting {
            return doc;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("fit did not finish");
}

#[tokio::test]
async fn full_session_round_trip() {
    let h = harness_with(None);
    let s = create(&h).await;
    assert_eq!(s.status, SessionStatus::Idle);
    assert_eq!(s.version, 1);

    let (status, body) = call(&h.app, "GET", &format!("/sessions/{}/result", s.id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(String::from_utf8_lossy(&body).contains("no result"));

    let (status, _) = call(&h.app, "POST", &format!("/sessions/{}/fit", s.id), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let done = wait_done(&h, &s.id).await;
    assert_eq!(done.status, SessionStatus::Done, "{:?}", done.error);

    let (status, body) = call(&h.app, "GET", &format!("/sessions/{}/result", s.id), None).await;
    assert_eq!(status, StatusCode::OK);
    let env: ResultEnvelope = serde_json::from_slice(&body).unwrap();
    assert_eq!(env.result_version, 1);
    assert_eq!(env.landmark_version, 1);
    assert!(
        env.result.e_error <= 1e-3,
        "exact landmarks should refit exactly: {}",
        env.result.e_error
    );
    assert_eq!(env.result.targets.len(), LANDMARK_COUNT);
    let mesh = env.mesh.to_mesh::<f64>().unwrap();
    assert_eq!(mesh.num_vertices(), 24 * 30 + 1);

    let (status, body) = call(&h.app, "GET", &format!("/sessions/{}/mesh.obj", s.id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8_lossy(&body)
        .lines()
        .any(|l| l.starts_with("f ")));
    let (status, body) = call(
        &h.app,
        "GET",
        &format!("/sessions/{}/overlay.png", s.id),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&body[..8], b"\x89PNG\r\n\x1a\n");

    let mut moved = h.landmarks.clone();
    moved.points[0][0] += 3.0;
    let (status, body) = call(
        &h.app,
        "PUT",
        &format!("/sessions/{}/landmarks", s.id),
        Some(json!(moved)),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let updated: SessionDocument = serde_json::from_slice(&body).unwrap();
    assert_eq!(updated.version, 2);

    let (status, _) = call(
        &h.app,
        "POST",
        &format!("/sessions/{}/fit", s.id),
        Some(json!({ "iterations": 2 })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    wait_done(&h, &s.id).await;
    let (_, body) = call(&h.app, "GET", &format!("/sessions/{}/result", s.id), None).await;
    let env2: ResultEnvelope = serde_json::from_slice(&body).unwrap();
    assert_eq!(env2.result_version, 2);
    assert_eq!(env2.landmark_version, 2);
    assert!(env2.result.iterations.len() <= 2);

    let dir = h._dir.path().join(&s.id);
    for f in [
        "image.png",
        "landmarks_v1.json",
        "landmarks_v2.json",
        "session.json",
        "results/result_v1.json",
        "results/result_v2.json",
        "results/mesh_v2.obj",
        "results/overlay_v1.png",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let first: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("results/result_v1.json")).unwrap())
            .unwrap();
    assert_eq!(first["e_error"].as_f64().unwrap(), env.result.e_error);
}

#[tokio::test]
async fn create_rejects_bad_input() {
    let h = harness_with(None);
    let mut short = h.landmarks.clone();
    short.indices.truncate(60);
    short.points.truncate(60);
    let (status, body) = call(
        &h.app,
        "POST",
        "/sessions",
        Some(json!({ "image_base64": png_base64(), "landmarks": short })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(
        String::from_utf8_lossy(&body).contains("68"),
        "{}",
        String::from_utf8_lossy(&body)
    );

    let text = base64::engine::general_purpose::STANDARD.encode(b"GIF89a not really an image");
    let (status, _) = call(
        &h.app,
        "POST",
        "/sessions",
        Some(json!({ "image_base64": text, "landmarks": h.landmarks })),
    )
    .await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);

    let (status, _) = call(
        &h.app,
        "POST",
        "/sessions",
        Some(json!({ "landmarks": h.landmarks })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut far = h.landmarks.clone();
    far.indices[3] = 1_000_000;
    let (status, _) = call(
        &h.app,
        "POST",
        "/sessions",
        Some(json!({ "image_base64": png_base64(), "landmarks": far })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let h = harness_with(None);
    for (m, path) in [
        ("GET", "/sessions/nope"),
        ("POST", "/sessions/nope/fit"),
        ("GET", "/sessions/nope/result"),
        ("GET", "/sessions/nope/mesh.obj"),
    ] {
        let (status, _) = call(&h.app, m, path, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{m} {path}");
    }
    let (status, _) = call(
        &h.app,
        "PUT",
        "/sessions/nope/landmarks",
        Some(json!(h.landmarks)),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn conflicts_while_fitting() {
    let (tx, rx) = mpsc::channel::<()>();
    let rx = Arc::new(Mutex::new(rx));
    let hook: caricature_service::FitHook = Arc::new(move || {
        let _ = rx.lock().unwrap().recv_timeout(Duration::from_secs(30));
    });
    let h = harness_with(Some(hook));
    let s = create(&h).await;
    let (status, _) = call(&h.app, "POST", &format!("/sessions/{}/fit", s.id), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);

    let (status, _) = call(&h.app, "POST", &format!("/sessions/{}/fit", s.id), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(
        &h.app,
        "PUT",
        &format!("/sessions/{}/landmarks", s.id),
        Some(json!(h.landmarks)),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, body) = call(&h.app, "GET", &format!("/sessions/{}", s.id), None).await;
    let doc: SessionDocument = serde_json::from_slice(&body).unwrap();
    assert_eq!(doc.status, SessionStatus::Fitting);
    assert_eq!(doc.version, 1);

    tx.send(()).unwrap();
    let done = wait_done(&h, &s.id).await;
    assert_eq!(done.status, SessionStatus::Done);
    let (status, _) = call(
        &h.app,
        "PUT",
        &format!("/sessions/{}/landmarks", s.id),
        Some(json!(h.landmarks)),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn invalid_overrides_leave_session_idle() {
    let h = harness_with(None);
    let s = create(&h).await;
    let (status, _) = call(
        &h.app,
        "POST",
        &format!("/sessions/{}/fit", s.id),
        Some(json!({ "lambda": -1.0 })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &h.app,
        "POST",
        &format!("/sessions/{}/fit", s.id),
        Some(json!({ "bogus": 1 })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, body) = call(&h.app, "GET", &format!("/sessions/{}", s.id), None).await;
    let doc: SessionDocument = serde_json::from_slice(&body).unwrap();
    assert_eq!(doc.status, SessionStatus::Idle);
}
