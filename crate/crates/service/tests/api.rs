use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use eqar_core::data_io::image::{decode_png, GRAY};
use eqar_core::data_io::{CheckpointManifest, GeneratorBundleConfig, ModelBundle, Provenance};
use eqar_core::generator::{FlowHeadConfig, Generator, GeneratorConfig, Variant};
use eqar_core::sampler::SamplerConfig;
use eqar_core::tokenizer::{Codec, LinearMode, LinearTokenizer, LinearTokenizerConfig, TokenLayout};
use eqar_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

const W: usize = 8;

fn bundle(variant: Variant) -> ModelBundle {
    let codec = Codec::Linear(
        LinearTokenizer::new(LinearTokenizerConfig {
            image_h: 8,
            image_w: 16,
            n_tokens: W,
            layout: TokenLayout::Columns,
            mode: LinearMode::Pooled { cell_h: 2, cell_w: 2 },
            scale: 2.0,
        })
        .unwrap(),
    );
    let gcfg = GeneratorConfig {
        variant,
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        window_w: 2,
        cond_seq_len: 2,
        n_classes: 3,
        mlp_ratio: 2,
        token_channels: codec.token_channels(),
        max_len: W,
        head: FlowHeadConfig { mlp_layers: 2, mlp_hidden: 16, t_embed_dim: 8 },
        ..Default::default()
    };
    let generator = Generator::new(gcfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let sampler = SamplerConfig { n_steps: 8, ..Default::default() };
    let config = GeneratorBundleConfig { generator: gcfg, codec: codec.config(), sampler, class_names: vec![] };
    let manifest = CheckpointManifest {
        cfg_end: 1.0,
        config: Value::Null,
        ema: false,
        ema_params: vec![],
        extra: Value::Null,
        kind: "generator".into(),
        params: vec![],
        provenance: Provenance::default(),
        version: 1,
    };
    ModelBundle { generator, codec, config, manifest }
}

fn state(model: Option<ModelBundle>, cfg: ServiceConfig) -> Arc<AppState> {
    Arc::new(AppState::new(model, cfg).unwrap())
}

fn app() -> Arc<AppState> {
    state(Some(bundle(Variant::Equivariant)), ServiceConfig::default())
}

async fn call(app: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create(app: &Arc<AppState>, body: Value) -> String {
    let (s, v) = json_call(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn strip_pixels(v: &Value) -> (usize, usize, Vec<u8>) {
    decode_png(&STANDARD.decode(v["image_strip"].as_str().unwrap()).unwrap()).unwrap()
}

#[tokio::test]
async fn scripted_session_keeps_strips_byte_identical() {
    let app = app();
    let id = create(&app, json!({"class_id": 1, "target_len": W, "seed": 5})).await;
    let mut strips = Vec::new();
    for p in 0..W {
        let (s, v) = json_call(&app, Method::POST, &format!("/v1/sessions/{id}/step"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["position"], p);
        assert_eq!(v["done"], p == W - 1);
        assert!(v["token_norm"].as_f64().unwrap() > 0.0);
        let (h, w, _) = strip_pixels(&v);
        assert_eq!((h, w), (8, 16 / W));
        strips.push(v["image_strip"].as_str().unwrap().to_string());
    }
    let (s, v) = json_call(&app, Method::POST, &format!("/v1/sessions/{id}/step"), None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("conflict")));

    let (s, v) = json_call(&app, Method::POST, &format!("/v1/sessions/{id}/reject"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["position"], W - 1);
    assert_ne!(v["image_strip"].as_str().unwrap(), strips[W - 1]);
    strips[W - 1] = v["image_strip"].as_str().unwrap().to_string();

    // full image = concatenation of the strips, earlier ones untouched
    let (s, png) = call(&app, Method::GET, &format!("/v1/sessions/{id}/image"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (h, width, rgb) = decode_png(&png).unwrap();
    assert_eq!((h, width), (8, 16));
    let bw = 16 / W;
    for (p, strip) in strips.iter().enumerate() {
        let (_, _, px) = decode_png(&STANDARD.decode(strip).unwrap()).unwrap();
        for y in 0..h {
            assert_eq!(&rgb[(y * width + p * bw) * 3..(y * width + (p + 1) * bw) * 3], &px[y * bw * 3..(y + 1) * bw * 3]);
        }
    }
}

#[tokio::test]
async fn reject_redraws_only_the_latest_position() {
    let app = app();
    let id = create(&app, json!({"class_id": 0, "target_len": 5, "seed": 11})).await;
    let (s, _) = json_call(&app, Method::POST, &format!("/v1/sessions/{id}/reject"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let step = format!("/v1/sessions/{id}/step");
    let (_, a) = json_call(&app, Method::POST, &step, None).await;
    let (_, b) = json_call(&app, Method::POST, &step, None).await;
    let (_, r) = json_call(&app, Method::POST, &format!("/v1/sessions/{id}/reject"), None).await;
    let (_, c) = json_call(&app, Method::POST, &step, None).await;
    assert_eq!([&a["position"], &b["position"], &r["position"], &c["position"]], [0, 1, 1, 2]);
    assert_ne!(b["image_strip"], r["image_strip"]);

    let (_, png) = call(&app, Method::GET, &format!("/v1/sessions/{id}/image"), None).await;
    let (h, width, rgb) = decode_png(&png).unwrap();
    let (_, _, first) = strip_pixels(&a);
    let bw = 2;
    for y in 0..h {
        assert_eq!(&rgb[y * width * 3..(y * width + bw) * 3], &first[y * bw * 3..(y + 1) * bw * 3]);
        // positions 3 and 4 are not generated yet
        assert!(rgb[(y * width + 3 * bw) * 3..(y + 1) * width * 3].iter().all(|&v| v == GRAY));
    }
}

#[tokio::test]
async fn fixed_seeds_reproduce_the_strip_stream() {
    let app = app();
    let mut streams = Vec::new();
    for _ in 0..2 {
        let id = create(&app, json!({"class_id": 2, "target_len": 4, "seed": 99, "cfg_end": 2.0})).await;
        let mut bytes = Vec::new();
        for path in ["step", "step", "reject", "step"] {
            let (_, v) = json_call(&app, Method::POST, &format!("/v1/sessions/{id}/{path}"), None).await;
            bytes.push(v["image_strip"].as_str().unwrap().to_string());
        }
        streams.push(bytes);
    }
    assert_eq!(streams[0], streams[1]);
}

#[tokio::test]
async fn creation_validates_and_echoes() {
    let app = app();
    let (s, v) = json_call(&app, Method::POST, "/v1/sessions", Some(json!({"class_id": 0, "target_len": 3}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert!(v["config"]["seed"].as_u64().unwrap() < 1 << 53, "server-drawn seed is echoed");
    assert_eq!(v["config"]["n_steps"], 8, "defaults come from the checkpoint");
    assert_eq!((v["image_h"].as_u64(), v["band_width"].as_u64()), (Some(8), Some(2)));
    for bad in [
        json!({"class_id": 3, "target_len": 3}),
        json!({"class_id": 0, "target_len": 0}),
        json!({"class_id": 0, "target_len": 16 * W + 1}),
        json!({"class_id": 0, "target_len": 3, "colour": "red"}),
        json!({"target_len": 3}),
    ] {
        let (s, v) = json_call(&app, Method::POST, "/v1/sessions", Some(bad.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad} → {v}");
    }
    let (s, _) = json_call(&app, Method::POST, "/v1/sessions", Some(json!({"class_id": 0, "target_len": 16 * W}))).await;
    assert_eq!(s, StatusCode::CREATED, "long canvas up to the ceiling");

    let base = state(Some(bundle(Variant::Baseline2d)), ServiceConfig::default());
    let (s, _) = json_call(&base, Method::POST, "/v1/sessions", Some(json!({"class_id": 0, "target_len": W + 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "baseline cannot extend");
    let (_, info) = json_call(&base, Method::GET, "/v1/model", None).await;
    assert_eq!((info["extrapolates"].as_bool(), info["max_target_len"].as_u64()), (Some(false), Some(W as u64)));
}

#[tokio::test]
async fn classes_delete_and_missing_sessions() {
    let app = app();
    let (s, v) = json_call(&app, Method::GET, "/v1/classes", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 3);
    let id = create(&app, json!({"class_id": 0, "target_len": 2})).await;
    let (_, png) = call(&app, Method::GET, &format!("/v1/sessions/{id}/image"), None).await;
    assert!(decode_png(&png).unwrap().2.iter().all(|&v| v == GRAY), "fresh canvas is gray");
    let (s, v) = json_call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!((s, v["status"].as_str(), v["accepted"].as_u64()), (StatusCode::OK, Some("active"), Some(0)));
    for _ in 0..2 {
        let (s, _) = call(&app, Method::DELETE, &format!("/v1/sessions/{id}"), None).await;
        assert_eq!(s, StatusCode::NO_CONTENT);
    }
    for (m, path) in [(Method::POST, "step"), (Method::POST, "reject"), (Method::GET, "image")] {
        let (s, _) = call(&app, m, &format!("/v1/sessions/{id}/{path}"), None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
    }
}

#[tokio::test]
async fn unloaded_model_and_full_server_answer_503() {
    let empty = state(None, ServiceConfig::default());
    for (m, uri, body) in [
        (Method::POST, "/v1/sessions", Some(json!({"class_id": 0, "target_len": 2}))),
        (Method::GET, "/v1/classes", None),
    ] {
        let (s, _) = call(&empty, m, uri, body).await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    }
    let small = state(Some(bundle(Variant::Equivariant)), ServiceConfig { max_sessions: 2, ..Default::default() });
    create(&small, json!({"class_id": 0, "target_len": 2})).await;
    let id = create(&small, json!({"class_id": 0, "target_len": 2})).await;
    let (s, _) = call(&small, Method::POST, "/v1/sessions", Some(json!({"class_id": 0, "target_len": 2}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    call(&small, Method::DELETE, &format!("/v1/sessions/{id}"), None).await;
    create(&small, json!({"class_id": 0, "target_len": 2})).await;
}

#[tokio::test]
async fn a_busy_session_answers_423() {
    let app = app();
    let id = create(&app, json!({"class_id": 0, "target_len": 4})).await;
    let handle = app.session(&id).unwrap();
    let guard = handle.lock().await;
    let (s, v) = json_call(&app, Method::POST, &format!("/v1/sessions/{id}/step"), None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::LOCKED, Some("step_in_flight")));
    drop(guard);
    let (s, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/step"), None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_steps_never_interleave() {
    let app = app();
    let id = create(&app, json!({"class_id": 1, "target_len": 64, "n_steps": 200})).await;
    let tasks: Vec<_> = (0..12)
        .map(|_| {
            let (app, uri) = (app.clone(), format!("/v1/sessions/{id}/step"));
            tokio::spawn(async move { json_call(&app, Method::POST, &uri, None).await })
        })
        .collect();
    let mut positions = Vec::new();
    for t in tasks {
        let (s, v) = t.await.unwrap();
        match s {
            StatusCode::OK => positions.push(v["position"].as_u64().unwrap()),
            StatusCode::LOCKED => {}
            other => panic!("unexpected {other}"),
        }
    }
    positions.sort_unstable();
    assert!(!positions.is_empty());
    assert_eq!(positions, (0..positions.len() as u64).collect::<Vec<_>>());
    let (_, v) = json_call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(v["accepted"].as_u64(), Some(positions.len() as u64));
}

#[tokio::test]
async fn idle_sessions_expire() {
    let app = state(Some(bundle(Variant::Equivariant)), ServiceConfig { idle_ttl: Duration::from_millis(40), ..Default::default() });
    let id = create(&app, json!({"class_id": 0, "target_len": 2})).await;
    tokio::time::sleep(Duration::from_millis(80)).await;
    let (s, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/step"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(app.session_count(), 0);
}
