use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use tower::ServiceExt;

use oedct::archive::SessionArchive;
use oedct::config::RunConfig;
use oedct::gauss::{build_prior_cov, NoiseModel};
use oedct::geometry::{DesignPoint, ProjectionOperator};
use oedct_service::wire::{FloatArray, Precision};
use oedct_service::{router, AppState};

/// Obstructed desk-scale setup with a bright inclusion in the top right.
fn scripted_config() -> Value {
    json!({
        "grid": {"n": 16},
        "beam": {"detectors": 5, "width": 0.5},
        "prior": {"gamma": 1.0, "ell": 0.05},
        "noise": {"sigma": 0.02},
        "design_grid": {"angle_step_deg": 6.0},
        "criterion": "A",
        "obstruction": {"kind": "rect", "lo": [0.0, 0.45], "hi": [0.5, 0.55]},
        "roi": {"kind": "outside_obstruction"},
        "seed": 11,
        "phantom": {"inclusions": [{"shape": {"kind": "disk", "center": [0.75, 0.75], "radius": 0.12}, "value": 1.5}]}
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn floats(v: &Value) -> Vec<f64> {
    serde_json::from_value::<FloatArray>(v.clone()).unwrap().decode().unwrap()
}

async fn create(app: &Router, config: Value) -> (String, u64) {
    let (status, body) = call(app, "POST", "/sessions", Some(config)).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    (body["id"].as_str().unwrap().to_string(), body["revision"].as_u64().unwrap())
}

/// Dense one-shot posterior of the stacked operator.
fn batch_posterior(cfg: &RunConfig, points: &[DesignPoint], data: &[Vec<f64>]) -> (DVector<f64>, DVector<f64>) {
    let problem = cfg.problem().unwrap();
    let ops: Vec<ProjectionOperator> = points.iter().map(|p| problem.operator(*p).unwrap()).collect();
    let stacked = ProjectionOperator::stack(&ops);
    let r = stacked.to_dense();
    let y = DVector::from_iterator(data.iter().map(Vec::len).sum(), data.iter().flatten().copied());
    let g0 = build_prior_cov(&problem.grid, &cfg.hyper_params().unwrap());
    let noise = NoiseModel::white(r.nrows(), cfg.noise.sigma);
    let s = &r * &g0 * r.transpose() + noise.cov();
    let gain = &g0 * r.transpose() * s.clone().try_inverse().unwrap();
    let mean = &gain * &y;
    let cov: DMatrix<f64> = &g0 - &gain * &r * &g0;
    (mean, cov.diagonal())
}

#[tokio::test]
async fn scripted_flow_matches_batch_posterior_and_replays() {
    let app = router(AppState::default());
    let (id, mut rev) = create(&app, scripted_config()).await;
    assert_eq!(rev, 0);

    let (_, s0) = call(&app, "GET", &format!("/sessions/{id}?precision=f64"), None).await;
    assert_eq!(s0["generation"], 0);
    assert!(floats(&s0["reconstruction"]).iter().all(|v| *v == 0.0));
    assert!(floats(&s0["std"]).iter().all(|v| (v - 1.0).abs() < 1e-9));
    let obstruction = s0["obstruction_pixels"].as_array().unwrap().len();
    assert!(obstruction > 0);
    assert_eq!(s0["roi_pixels"].as_array().unwrap().len() + obstruction, 256);

    let step = |app: Router, id: String, rev: u64, seed: u64| async move {
        let (st, next) = call(&app, "POST", &format!("/sessions/{id}/next"), Some(json!({"revision": rev}))).await;
        assert_eq!(st, StatusCode::OK, "{next}");
        let rev = next["revision"].as_u64().unwrap();
        let lv = &next["landscape"];
        let n_cand = lv["angles"].as_array().unwrap().len() * lv["offsets"].as_array().unwrap().len();
        assert_eq!(floats(&lv["values"]).len(), n_cand);
        let (st, meas) = call(
            &app,
            "POST",
            &format!("/sessions/{id}/measure?precision=f64"),
            Some(json!({"revision": rev, "simulate": {"seed": seed}})),
        )
        .await;
        assert_eq!(st, StatusCode::OK, "{meas}");
        (meas["revision"].as_u64().unwrap(), floats(&meas["std"]))
    };

    let (r, std1) = step(app.clone(), id.clone(), rev, 100).await;
    rev = r;
    assert!(std1.iter().all(|v| *v <= 1.0 + 1e-12));
    assert!(std1.iter().any(|v| *v < 0.9));
    let (r, _) = step(app.clone(), id.clone(), rev, 101).await;
    rev = r;

    let (st, roi) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/roi"),
        Some(json!({"revision": rev, "roi": {"kind": "rect", "lo": [0.5, 0.5], "hi": [1.0, 1.0]}})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{roi}");
    rev = roi["revision"].as_u64().unwrap();
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["roi_pixels"].as_array().unwrap().len(), 64);

    for seed in 102..105 {
        let (r, _) = step(app.clone(), id.clone(), rev, seed).await;
        rev = r;
    }

    let (st, stop) = call(&app, "POST", &format!("/sessions/{id}/stop?precision=f64"), Some(json!({"revision": rev}))).await;
    assert_eq!(st, StatusCode::OK, "{stop}");
    rev = stop["revision"].as_u64().unwrap();
    assert_eq!(rev, 12);
    let (st, again) = call(&app, "POST", &format!("/sessions/{id}/stop"), Some(json!({"revision": rev}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(again["code"], "SessionStopped");

    let (st, archive) = call(&app, "GET", stop["archive"].as_str().unwrap(), None).await;
    assert_eq!(st, StatusCode::OK);
    let archive: SessionArchive = serde_json::from_value(archive).unwrap();
    assert_eq!(archive.designs.len(), 5);

    // After the ROI moves to the top right quadrant every beam crosses it.
    let problem = archive.config.problem().unwrap();
    for p in &archive.designs[2..] {
        let op = problem.operator(*p).unwrap();
        let hits = op
            .rows()
            .iter()
            .flat_map(|r| r.indices.iter())
            .filter(|&&i| i / 16 >= 8 && i % 16 >= 8)
            .count();
        assert!(hits > 0, "beam {p:?} misses the quadrant");
    }

    let (mean, var) = batch_posterior(&archive.config, &archive.designs, &archive.data);
    let x = floats(&stop["reconstruction"]);
    let v = floats(&stop["variance"]);
    let scale = mean.amax().max(1.0);
    for i in 0..x.len() {
        assert!((x[i] - mean[i]).abs() <= 1e-7 * scale, "mean {i}: {} vs {}", x[i], mean[i]);
        assert!((v[i] - var[i]).abs() <= 1e-7, "var {i}: {} vs {}", v[i], var[i]);
    }

    let replayed = SessionArchive::from_json(&archive.to_json()).unwrap().replay().unwrap();
    let rec = replayed.session().reconstruction();
    assert!(rec.mean.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(replayed.archive(), &archive);
}

#[tokio::test]
async fn simulated_measurements_are_reproducible() {
    let app = router(AppState::default());
    let mut outs = Vec::new();
    for _ in 0..2 {
        let (id, rev) = create(&app, scripted_config()).await;
        let (_, next) = call(&app, "POST", &format!("/sessions/{id}/next"), Some(json!({"revision": rev}))).await;
        let rev = next["revision"].as_u64().unwrap();
        let (_, meas) = call(
            &app,
            "POST",
            &format!("/sessions/{id}/measure?precision=f64"),
            Some(json!({"revision": rev, "simulate": {"seed": 5}})),
        )
        .await;
        outs.push((id, meas["reconstruction"]["data"].as_str().unwrap().to_string()));
    }
    assert_ne!(outs[0].0, outs[1].0);
    assert_eq!(outs[0].1, outs[1].1);
}

#[tokio::test]
async fn uploaded_data_in_both_encodings() {
    let app = router(AppState::default());
    let (id, rev) = create(&app, scripted_config()).await;
    let (_, next) = call(&app, "POST", &format!("/sessions/{id}/next"), Some(json!({"revision": rev}))).await;
    let m = next["design"]["active_rays"].as_u64().unwrap() as usize;
    let rev = next["revision"].as_u64().unwrap();

    let (st, err) = call(&app, "POST", &format!("/sessions/{id}/measure"), Some(json!({"revision": rev, "data": [0.1]}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "DimensionMismatch");

    let enc = FloatArray::encode(&vec![0.25; m], Precision::F64);
    let (st, meas) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/measure"),
        Some(json!({"revision": rev, "data_encoded": enc})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{meas}");
    assert_eq!(meas["generation"], 1);
    assert_eq!(meas["std"]["dtype"], "f32");

    let (st, err) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/measure"),
        Some(json!({"revision": rev + 1, "data": [0.0], "simulate": {"seed": 1}})),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["field"], "data");
}

#[tokio::test]
async fn error_replies() {
    let app = router(AppState::default());

    let (st, err) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "NotFound");

    let mut bad = scripted_config();
    bad["noise"]["sigma"] = json!(-1.0);
    let (st, err) = call(&app, "POST", "/sessions", Some(bad)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "InvalidConfig");
    assert_eq!(err["field"], "noise.sigma");

    let mut bad = scripted_config();
    bad["grid"]["m"] = json!(3);
    let (st, err) = call(&app, "POST", "/sessions", Some(bad)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["field"], "grid.m");

    let (st, err) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "InvalidConfig");

    let (id, rev) = create(&app, scripted_config()).await;
    let (st, err) = call(&app, "POST", &format!("/sessions/{id}/next"), Some(json!({"revision": rev + 3}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["code"], "StaleRevision");

    let (st, err) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/roi"),
        Some(json!({"revision": rev, "roi": {"kind": "pixels", "indices": []}})),
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{err}");
    assert_eq!(err["field"], "roi");

    let (st, err) = call(&app, "POST", &format!("/sessions/{id}/measure"), Some(json!({"revision": rev, "simulate": {"seed": 1}}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["code"], "NoPendingDesign");

    let (st, _) = call(&app, "GET", &format!("/sessions/{id}?precision=f16"), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, err) = call(&app, "POST", &format!("/sessions/{id}/next"), Some(json!({"rev": 0}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "BadRequest");

    // Rejected mutations leave the revision alone.
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["revision"], 0);
}

#[tokio::test]
async fn default_config_and_quadrant_roi() {
    let cfg = RunConfig::from_json_str(&scripted_config().to_string(), ".").unwrap();
    let app = router(AppState::new(Some(cfg)));
    let (st, body) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(st, StatusCode::CREATED);
    let id = body["id"].as_str().unwrap();
    let (st, r) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/roi"),
        Some(json!({"revision": 0, "roi": {"kind": "rect", "lo": [0.5, 0.5], "hi": [1.0, 1.0]}})),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(r["revision"], 1);
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let pixels: Vec<usize> = serde_json::from_value(s["roi_pixels"].clone()).unwrap();
    assert_eq!(pixels.len(), 16 * 16 / 4);
    assert!(pixels.iter().all(|&i| i / 16 >= 8 && i % 16 >= 8));
}
