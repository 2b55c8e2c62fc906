mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use styleprompter::image_io::{decode_png, encode_png};
use styleprompter::latent_spaces::LatentCode;
use styleprompter::pipeline::{self, MixMode};
use styleprompter::smart::BetaWeights;
use styleprompter::Tensor;
use styleprompter_cli::service::{router, AppState, ServiceConfig, ENV_BIND, ENV_CHECKPOINT};

struct Fixture {
    app: Router,
    state: Arc<AppState>,
    models: styleprompter::models::Models,
    images: Vec<Tensor>,
}

fn fixture(cfg: ServiceConfig) -> Fixture {
    let models = common::models();
    let images = common::images(&models, 3);
    let state = Arc::new(AppState::new(
        common::models(),
        common::catalog(&models),
        &cfg,
    ));
    Fixture {
        app: router(Arc::clone(&state)),
        state,
        models,
        images,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(serde_json::to_vec(&body).unwrap())).await
}

fn b64_png(t: &Tensor) -> String {
    B64.encode(encode_png(t).unwrap())
}

fn image_of(v: &Value) -> Vec<u8> {
    B64.decode(v.as_str().unwrap()).unwrap()
}

async fn invert(f: &Fixture, i: usize) -> Value {
    let (s, v) = post(
        &f.app,
        "/api/invert",
        json!({ "image": b64_png(&f.images[i]) }),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

#[tokio::test]
async fn health_and_directions() {
    let cfg = ServiceConfig {
        checkpoint: "models/toy.spck".into(),
        ..ServiceConfig::default()
    };
    let f = fixture(cfg);
    let (s, v) = call(&f.app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        v,
        json!({ "status": "ok", "checkpoint": "models/toy.spck" })
    );
    let (s, v) = call(&f.app, "GET", "/api/directions", None).await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["smile", "age"]);
    let (s, _) = call(&f.app, "GET", "/api/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invert_matches_the_pipeline_and_is_deterministic() {
    let f = fixture(ServiceConfig::default());
    let a = invert(&f, 0).await;
    let b = invert(&f, 0).await;
    assert_eq!(a["image_refined"], b["image_refined"]);
    assert_eq!(a["image_baseline"], b["image_baseline"]);
    assert_eq!(a["latents"], b["latents"]);
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(f.state.session_count(), 2);

    let direct = pipeline::invert(&f.models, &f.images[0], BetaWeights::ONE).unwrap();
    assert_eq!(
        image_of(&a["image_refined"]),
        encode_png(&direct.image_refined.tensor).unwrap()
    );
    let w: LatentCode = serde_json::from_value(a["latents"].clone()).unwrap();
    assert_eq!(w, direct.w_inv);

    let (_, z) = post(
        &f.app,
        "/api/invert",
        json!({ "image": b64_png(&f.images[0]), "beta1": 0.0, "beta2": 0.0 }),
    )
    .await;
    assert_eq!(z["image_refined"], z["image_baseline"]);
    assert_eq!(z["image_baseline"], a["image_baseline"]);
}

#[tokio::test]
async fn edit_at_zero_alpha_returns_the_refined_inversion() {
    let f = fixture(ServiceConfig::default());
    let inv = invert(&f, 1).await;
    let sid = inv["session_id"].clone();
    let (s, v) = post(
        &f.app,
        "/api/edit",
        json!({ "session_id": sid, "direction": "smile", "alpha": 0.0, "beta1": 1.0, "beta2": 1.0 }),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["image"], inv["image_refined"]);

    let (s, v) = post(
        &f.app,
        "/api/edit",
        json!({ "session_id": sid, "direction": "age", "alpha": 3.0, "beta1": 0.5 }),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let direct_inv = pipeline::invert(&f.models, &f.images[1], BetaWeights::ONE).unwrap();
    let dir = common::catalog(&f.models).get("age").unwrap().clone();
    let beta = BetaWeights::new(0.5, 1.0).unwrap();
    let direct = pipeline::edit(&f.models, &direct_inv, &dir, 3.0, beta).unwrap();
    assert_eq!(image_of(&v["image"]), encode_png(&direct.tensor).unwrap());
}

#[tokio::test]
async fn unknown_names_are_404() {
    let f = fixture(ServiceConfig::default());
    let inv = invert(&f, 0).await;
    let (s, v) = post(
        &f.app,
        "/api/edit",
        json!({ "session_id": inv["session_id"], "direction": "wings", "alpha": 1.0 }),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v, json!({ "error": "unknown_direction" }));
    let (s, v) = post(
        &f.app,
        "/api/edit",
        json!({ "session_id": "nope", "direction": "smile", "alpha": 1.0 }),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_session");
    let (s, _) = post(
        &f.app,
        "/api/mix",
        json!({ "session_a": inv["session_id"], "session_b": "nope", "mode": "exchange", "param": 1 }),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let f = fixture(ServiceConfig::default());
    let (s, v) = call(&f.app, "POST", "/api/invert", Some(b"{not json".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "malformed_request");
    let (s, _) = post(&f.app, "/api/invert", json!({ "image": "@@@" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(
        &f.app,
        "/api/invert",
        json!({ "image": B64.encode(b"GIF89a") }),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&f.app, "/api/edit", json!({ "session_id": "x" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let wrong_size = Tensor::zeros(vec![3, 8, 8]);
    let (s, v) = post(
        &f.app,
        "/api/invert",
        json!({ "image": b64_png(&wrong_size) }),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    assert!(v["detail"].is_string());
    let inv = invert(&f, 0).await;
    let (s, _) = post(
        &f.app,
        "/api/mix",
        json!({ "session_a": inv["session_id"], "session_b": inv["session_id"], "mode": "progressive", "param": 0.5 }),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(
        &f.app,
        "/api/mix",
        json!({ "session_a": inv["session_id"], "session_b": inv["session_id"], "mode": "blend", "param": 1 }),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_images_are_413() {
    let f = fixture(ServiceConfig {
        max_image_size: 12,
        ..ServiceConfig::default()
    });
    let (s, v) = post(
        &f.app,
        "/api/invert",
        json!({ "image": b64_png(&f.images[0]) }),
    )
    .await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(v["error"], "image_too_large");
    let f = fixture(ServiceConfig::default());
    let big = Tensor::zeros(vec![3, 257, 4]);
    let (s, _) = post(&f.app, "/api/invert", json!({ "image": b64_png(&big) })).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn mix_matches_the_pipeline() {
    let f = fixture(ServiceConfig::default());
    let a = invert(&f, 0).await;
    let b = invert(&f, 2).await;
    let ia = pipeline::invert(&f.models, &f.images[0], BetaWeights::ONE).unwrap();
    let ib = pipeline::invert(&f.models, &f.images[2], BetaWeights::ONE).unwrap();
    for (mode, param) in [
        ("progressive", 3.0),
        ("exchange", 1.0),
        ("interpolate", 0.7),
    ] {
        let (s, v) = post(
            &f.app,
            "/api/mix",
            json!({ "session_a": a["session_id"], "session_b": b["session_id"], "mode": mode, "param": param }),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let mode: MixMode = mode.parse().unwrap();
        let direct = pipeline::mix(&f.models, &ia, &ib, mode, param, true).unwrap();
        assert_eq!(image_of(&v["image"]), encode_png(&direct.tensor).unwrap());
    }
    let l = f.models.generator.num_ws() as f64;
    let (_, v) = post(
        &f.app,
        "/api/mix",
        json!({ "session_a": a["session_id"], "session_b": b["session_id"], "mode": "progressive", "param": l, "smart": false }),
    )
    .await;
    let expected = f
        .models
        .generator
        .synthesize(&f.models.params, &ib.w_inv)
        .unwrap();
    assert_eq!(image_of(&v["image"]), encode_png(&expected.tensor).unwrap());
}

#[tokio::test]
async fn eviction_keeps_the_newest_sessions_correct() {
    let f = fixture(ServiceConfig {
        session_capacity: 2,
        ..ServiceConfig::default()
    });
    let s0 = invert(&f, 0).await;
    let s1 = invert(&f, 1).await;
    let edit = |sid: &Value| json!({ "session_id": sid, "direction": "smile", "alpha": 0.0 });
    // touching s0 makes s1 the eviction candidate
    let (st, _) = post(&f.app, "/api/edit", edit(&s0["session_id"])).await;
    assert_eq!(st, StatusCode::OK);
    let s2 = invert(&f, 2).await;
    assert_eq!(f.state.session_count(), 2);
    let (st, _) = post(&f.app, "/api/edit", edit(&s1["session_id"])).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    for s in [&s0, &s2] {
        let (st, v) = post(&f.app, "/api/edit", edit(&s["session_id"])).await;
        assert_eq!(st, StatusCode::OK);
        assert_eq!(v["image"], s["image_refined"]);
    }
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let f = fixture(ServiceConfig::default());
    let body = json!({ "image": b64_png(&f.images[0]) });
    let tasks: Vec<_> = (0..4)
        .map(|_| {
            let (app, body) = (f.app.clone(), body.clone());
            tokio::spawn(async move { post(&app, "/api/invert", body).await })
        })
        .collect();
    let mut images = Vec::new();
    for t in tasks {
        let (s, v) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        images.push(v["image_refined"].clone());
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
    let decoded = decode_png(&image_of(&images[0])).unwrap();
    assert_eq!(decoded.shape(), &[3, 16, 16]);
}

#[test]
fn config_defaults_env_and_validation() {
    let cfg: ServiceConfig = serde_json::from_str(r#"{"checkpoint": "a.spck"}"#).unwrap();
    assert_eq!(cfg.max_image_size, 256);
    assert_eq!(cfg.session_capacity, 32);
    let mut cfg2 = cfg.clone();
    cfg2.apply_env(|k| match k {
        k if k == ENV_BIND => Some("0.0.0.0:9000".into()),
        k if k == ENV_CHECKPOINT => Some("/tmp/b.spck".into()),
        _ => None,
    });
    assert_eq!(cfg2.bind, "0.0.0.0:9000");
    assert_eq!(cfg2.checkpoint.to_str(), Some("/tmp/b.spck"));
    let mut cfg3 = cfg.clone();
    cfg3.apply_env(|_| None);
    assert_eq!(cfg3, cfg);

    let dir = tempfile::tempdir().unwrap();
    let m = common::workspace(dir.path());
    let mut ok = ServiceConfig {
        checkpoint: dir.path().join("model.spck"),
        directions: Some(dir.path().join("dirs.json")),
        ..ServiceConfig::default()
    };
    let state = AppState::load(&ok).unwrap();
    assert_eq!(state.session_count(), 0);
    drop(m);
    ok.session_capacity = 0;
    assert!(ok.validate().is_err());
    ok.session_capacity = 1;
    ok.directions = Some(dir.path().join("missing.json"));
    assert!(ok.validate().is_err());
}
