use adscribe_core::backend::{complete_with_retry, AuthStyle, Backend, BackendError, HttpBackend, HttpBackendConfig, RetryPolicy};
use adscribe_core::frame::FrameBuffer;
use adscribe_core::pipeline::{run_with_backend, ClipStatus};
use adscribe_core::promptgen::{BundleKind, BundleMeta, PromptBundle};
use adscribe_core::synth::{write_fixture, FixtureSpec};
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use std::sync::{Arc, Mutex};

#[derive(Default)]
struct Server {
    requests: Mutex<Vec<(HeaderMap, Value)>>,
    fail_first: Mutex<usize>,
}

async fn chat(State(s): State<Arc<Server>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    s.requests.lock().unwrap().push((headers, body));
    {
        let mut f = s.fail_first.lock().unwrap();
        if *f > 0 {
            *f -= 1;
            return (StatusCode::TOO_MANY_REQUESTS, Json(json!({ "error": "slow down" })));
        }
    }
    (StatusCode::OK, Json(json!({ "choices": [{ "message": { "role": "assistant", "content": "  Amy walks to the pier.  " } }] })))
}

async fn serve(fail_first: usize) -> (String, Arc<Server>) {
    let state = Arc::new(Server { fail_first: Mutex::new(fail_first), ..Default::default() });
    let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(state.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1/chat/completions"), state)
}

fn config(endpoint: String) -> HttpBackendConfig {
    HttpBackendConfig { endpoint, timeout_s: 5, ..Default::default() }
}

fn bundle(frames: usize) -> PromptBundle {
    PromptBundle {
        system_text: "sys".into(),
        user_text: "describe".into(),
        frames: vec![FrameBuffer::filled(8, 6, [10, 20, 30]); frames],
        metadata: BundleMeta {
            clip_id: "c".into(),
            movie_title: "M".into(),
            requested_word_count: Some(5),
            template_version: "t".into(),
            kind: BundleKind::Ad,
        },
    }
}

#[tokio::test]
async fn request_shape_and_auth() {
    let (url, server) = serve(0).await;
    let backend = HttpBackend::with_key(config(url), "sekrit".into()).unwrap();
    let text = backend.complete(&bundle(3)).await.unwrap();
    assert_eq!(text, "  Amy walks to the pier.  ");
    let reqs = server.requests.lock().unwrap();
    let (headers, body) = &reqs[0];
    assert_eq!(headers["authorization"], "Bearer sekrit");
    assert_eq!(body["model"], "gpt-4o");
    assert_eq!(body["messages"][0]["content"], "sys");
    let parts = body["messages"][1]["content"].as_array().unwrap();
    assert_eq!(parts.len(), 4);
    assert_eq!(parts[0]["text"], "describe");
    assert!(parts[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[tokio::test]
async fn api_key_header_style() {
    let (url, server) = serve(0).await;
    let cfg = HttpBackendConfig { auth: AuthStyle::ApiKeyHeader, ..config(url) };
    HttpBackend::with_key(cfg, "k2".into()).unwrap().complete(&bundle(0)).await.unwrap();
    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs[0].0["api-key"], "k2");
    assert!(reqs[0].0.get("authorization").is_none());
}

#[tokio::test]
async fn rate_limit_is_retried() {
    let (url, server) = serve(2).await;
    let backend = HttpBackend::with_key(config(url), "k".into()).unwrap();
    let retry = RetryPolicy { max_retries: 3, base_delay_ms: 1, max_delay_ms: 4 };
    complete_with_retry(&backend, &bundle(1), &retry).await.unwrap();
    assert_eq!(server.requests.lock().unwrap().len(), 3);
}

#[tokio::test]
async fn status_error_surfaces_after_retries() {
    let (url, server) = serve(100).await;
    let backend = HttpBackend::with_key(config(url), "k".into()).unwrap();
    let retry = RetryPolicy { max_retries: 2, base_delay_ms: 1, max_delay_ms: 2 };
    let err = complete_with_retry(&backend, &bundle(1), &retry).await.unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 429, .. }), "{err}");
    assert_eq!(server.requests.lock().unwrap().len(), 3);
}

#[test]
fn missing_key_is_reported() {
    let cfg = HttpBackendConfig { api_key_env: "ADSCRIBE_TEST_SURELY_UNSET".into(), ..Default::default() };
    assert!(matches!(HttpBackend::from_env(cfg), Err(BackendError::MissingKey(_))));
}

#[tokio::test]
async fn pipeline_over_http() {
    let (url, server) = serve(0).await;
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(dir.path(), &FixtureSpec { num_clips: 2, ..Default::default() }).unwrap();
    let backend = Arc::new(HttpBackend::with_key(config(url), "k".into()).unwrap());
    let summary = run_with_backend(&fx.config, backend).await.unwrap();
    assert_eq!(summary.manifest.count(ClipStatus::Done), 2);
    assert!(summary.outputs.iter().all(|o| o.text == "Amy walks to the pier."));
    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs.len(), 2);
    assert!(reqs.iter().all(|(_, b)| b["messages"][1]["content"].as_array().unwrap().len() == 11));
}
