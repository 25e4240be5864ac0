use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::routing::post;
use axum::Router;
use http_body_util::BodyExt;
use multiangle::backend::{Backend, DecodeOptions, GenerationResult, RemoteBackend, ToyBackend, ToyModelParams};
use multiangle::codec::{parse_output, OrderPolicy};
use multiangle::harness::Query;
use multiangle::slots::{AnglePreset, SlotRegistry};
use multiangle::{Error, Result};
use multiangle_service::{router, AppState, ErrorBody, Meta, RankedCandidate};
use serde_json::{json, Value};
use tower::ServiceExt;

const QUESTION: &str = "Which surface is best for rollerskating?";
const OPTIONS: &str = "(A) gravel (B) sand (C) blacktop";
const INPUT: &str = "$answer$ ; $explanation$ ; $question$ = Which surface is best for rollerskating? ; \
                     $mcoptions$ = (A) gravel (B) sand (C) blacktop";
const OUTPUT: &str = "$answer$ = blacktop ; $explanation$ = A wheeled vehicle requires smooth surfaces.";
const RANK_INPUT: &str = "$answer$ ; $question$ = Which surface is best for rollerskating?";

fn toy() -> ToyBackend {
    ToyBackend::from_memory(
        [(INPUT, OUTPUT), (RANK_INPUT, "$answer$ = blacktop")],
        ToyModelParams::default(),
    )
    .unwrap()
}

fn state() -> AppState {
    AppState::new(SlotRegistry::default(), Arc::new(toy()))
}

struct Down;

impl Backend for Down {
    fn name(&self) -> &str {
        "down"
    }
    fn generate(&self, _: &str, _: &DecodeOptions) -> Result<GenerationResult> {
        Err(Error::BackendUnavailable("connection refused".into()))
    }
    fn force_score(&self, _: &str, _: &str) -> Result<Vec<f64>> {
        Err(Error::BackendUnavailable("connection refused".into()))
    }
}

async fn call(app: Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn ask_body() -> Value {
    json!({"slots": {"question": QUESTION, "mcoptions": OPTIONS}, "targets": ["answer", "explanation"]})
}

#[tokio::test]
async fn ask_returns_raw_and_parsed() {
    let (status, body) = call(router(state()), "POST", "/api/ask", Some(ask_body())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["raw_input"], INPUT);
    assert_eq!(body["raw_output"], OUTPUT);
    assert_eq!(body["parsed"]["answer"], "blacktop");
    assert_eq!(body["parsed"]["explanation"], "A wheeled vehicle requires smooth surfaces.");
    assert_eq!(body["missing"], json!([]));
}

#[tokio::test]
async fn ask_matches_library_composition() {
    let reg = SlotRegistry::default();
    let queries = [
        (json!({"q": QUESTION}), json!(["a"])),
        (json!({"question": QUESTION, "M": OPTIONS}), json!(["answer", "explanation"])),
        (json!({"question": QUESTION, "context": "Skates need smooth ground. ; Sand is soft."}), json!(["e", "a"])),
        (json!({"answer": "blacktop", "question": QUESTION}), json!(["explanation"])),
    ];
    for (slots, targets) in queries {
        let (status, body) = call(
            router(state()),
            "POST",
            "/api/ask",
            Some(json!({"slots": slots, "targets": targets})),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let slots: Vec<(String, String)> = slots
            .as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_str().unwrap().to_string()))
            .collect();
        let targets: Vec<String> = serde_json::from_value(targets).unwrap();
        let query = Query::new(&reg, slots, &targets).unwrap();
        let input = query.input(&reg, OrderPolicy::AsGiven).unwrap();
        assert_eq!(body["raw_input"], input.as_str());
        let output = toy().generate(&input, &DecodeOptions::default()).unwrap().output;
        assert_eq!(body["raw_output"], output.as_str());
        let parsed = parse_output(&reg, &output, &query.angle.targets);
        assert_eq!(body["missing"], json!(parsed.missing));
        assert_eq!(body["parsed"], json!(parsed.values));
    }
}

#[tokio::test]
async fn ask_rejects_bad_requests() {
    let cases = [
        (json!({"slots": {"foo": "x"}, "targets": ["answer"]}), "unknown_slot"),
        (json!({"slots": {"question": "see $answer$"}, "targets": ["answer"]}), "marker_collision"),
        (json!({"slots": {"question": "q"}, "targets": []}), "empty_targets"),
        (json!({"slots": {"question": "q"}, "targets": ["question"]}), "overlapping_slots"),
        (
            json!({"slots": {"question": "q"}, "targets": ["answer"], "decode": {"mode": "nucleus", "top_p": 0.0}}),
            "invalid_decode_options",
        ),
        (json!({"slots": "nope"}), "malformed_body"),
    ];
    for (body, kind) in cases {
        let (status, resp) = call(router(state()), "POST", "/api/ask", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{resp}");
        let err: ErrorBody = serde_json::from_value(resp).unwrap();
        assert_eq!(err.error, kind);
        assert!(!err.detail.is_empty());
    }
}

#[tokio::test]
async fn backend_down_is_bad_gateway() {
    let down = AppState::new(SlotRegistry::default(), Arc::new(Down));
    let (status, body) = call(router(down.clone()), "POST", "/api/ask", Some(ask_body())).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error"], "backend_unavailable");
    assert!(body["detail"].as_str().unwrap().contains("connection refused"));
    let rank = json!({"slots": {"question": QUESTION}, "candidates": ["a1", "b1"]});
    let (status, _) = call(router(down), "POST", "/api/rank", Some(rank)).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
}

#[tokio::test]
async fn rank_orders_by_probability() {
    let body = json!({
        "slots": {"question": QUESTION, "mcoptions": OPTIONS},
        "candidates": ["gravel", "blacktop", "sand"],
        "include_m": false
    });
    let (status, resp) = call(router(state()), "POST", "/api/rank", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{resp}");
    let ranked: Vec<RankedCandidate> = serde_json::from_value(resp).unwrap();
    assert_eq!(ranked.len(), 3);
    assert_eq!(ranked[0].candidate, "blacktop");
    assert!(ranked.windows(2).all(|w| w[0].probability >= w[1].probability));
    assert!(ranked.iter().map(|c| c.probability).sum::<f64>() <= 1.0 + 1e-9);
    for c in &ranked {
        assert!((c.logprob.exp() - c.probability).abs() < 1e-12);
    }
}

#[tokio::test]
async fn rank_rejects_bad_candidates() {
    for (candidates, kind) in [
        (json!([]), "no_candidates"),
        (json!(["sand", "sand"]), "duplicate_candidates"),
        (json!(["$answer$"]), "marker_collision"),
    ] {
        let body = json!({"slots": {"question": QUESTION}, "candidates": candidates});
        let (status, resp) = call(router(state()), "POST", "/api/rank", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(resp["error"], kind);
    }
}

#[tokio::test]
async fn meta_lists_slots_angles_and_backend() {
    let (status, body) = call(router(state()), "GET", "/api/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let meta: Meta = serde_json::from_value(body).unwrap();
    assert_eq!(meta.slots.len(), 5);
    assert_eq!(meta.slots[0].name, "question");
    assert_eq!(meta.slots[0].abbrev, 'Q');
    assert_eq!(meta.backend, "toy");
    assert!(meta.angles.is_empty());
    assert_eq!(meta.order, "as_given");

    let reg = SlotRegistry::default();
    let angles = AnglePreset::Arc.angles(&reg).unwrap();
    let (_, body) = call(router(state().with_angles(angles)), "GET", "/api/meta", None).await;
    assert_eq!(body["angles"][0], "QMC->AE");
    assert_eq!(body["angles"].as_array().unwrap().len(), 10);
}

#[tokio::test]
async fn cors_is_permissive() {
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/ask")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = router(state()).oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test]
async fn wire_endpoints_expose_backend() {
    let (status, body) = call(
        router(state()),
        "POST",
        "/v1/generate",
        Some(json!({"input": INPUT, "mode": "beam", "beam_size": 4})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["output"], OUTPUT);
    let (status, body) = call(
        router(state()),
        "POST",
        "/v1/force",
        Some(json!({"input": RANK_INPUT, "output": "$answer$ = blacktop"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let lps: Vec<f64> = serde_json::from_value(body["token_logprobs"].clone()).unwrap();
    assert_eq!(lps.len(), 4);
    assert!(lps.iter().all(|lp| *lp <= 0.0));
}

/// Serves `app` on an ephemeral port from a background runtime.
fn spawn(app: Router) -> String {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        rt.block_on(async move { axum::serve(listener, app).await.unwrap() });
    });
    url
}

#[test]
fn remote_backend_round_trips_through_service() {
    let url = spawn(router(state()));
    let remote = RemoteBackend::new(url);
    let local = toy();
    let opts = DecodeOptions::default();
    assert_eq!(remote.generate(INPUT, &opts).unwrap().output, OUTPUT);
    for c in ["$answer$ = blacktop", "$answer$ = sand", "gravel"] {
        assert_eq!(
            remote.force_score(RANK_INPUT, c).unwrap(),
            local.force_score(RANK_INPUT, c).unwrap()
        );
    }
    let err = remote
        .generate("x", &DecodeOptions { max_tokens: 0, ..DecodeOptions::default() })
        .unwrap_err();
    assert!(matches!(err, Error::InvalidDecodeOptions(_)), "{err}");
}

#[test]
fn remote_backend_surfaces_server_failures() {
    let app = Router::new()
        .route("/v1/generate", post(|| async { (axum::http::StatusCode::SERVICE_UNAVAILABLE, "model loading") }))
        .route("/v1/force", post(|| async { "not json" }));
    let remote = RemoteBackend::new(spawn(app));
    let err = remote.generate("x", &DecodeOptions::default()).unwrap_err();
    assert!(err.is_backend());
    let msg = err.to_string();
    assert!(msg.contains("503") && msg.contains("model loading"), "{msg}");
    let err = remote.force_score("x", "y").unwrap_err();
    assert!(err.is_backend());
    assert!(err.to_string().contains("not json"));

    let down = RemoteBackend::new("http://127.0.0.1:9");
    assert!(down.generate("x", &DecodeOptions::default()).unwrap_err().is_backend());
}

#[test]
fn service_is_shareable_across_requests() {
    let url = spawn(router(state()));
    let remote = Arc::new(RemoteBackend::new(url).with_max_in_flight(2));
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let r = Arc::clone(&remote);
            std::thread::spawn(move || r.generate(INPUT, &DecodeOptions::default()).unwrap().output)
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), OUTPUT);
    }
}
