use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use xshot::model::{triplet_id, FrequencyGroup, Polarity, TripletExample};
use xshot::scoring::{
    complete_text, embed_texts, score_triplets, BackendConfig, CompletionParams, RetryPolicy, ENV_AUTH_HEADER,
    ENV_AUTH_TOKEN,
};
use xshot::Error;

#[derive(Default)]
struct Server {
    /// Requests to fail with 503 before answering normally.
    failures: AtomicUsize,
    requests: AtomicUsize,
    auth: Mutex<Vec<Option<String>>>,
    prompts: Mutex<Vec<Value>>,
}

type Shared = Arc<Server>;

fn gate(s: &Server, headers: &HeaderMap) -> Result<(), StatusCode> {
    s.requests.fetch_add(1, Ordering::SeqCst);
    s.auth
        .lock()
        .unwrap()
        .push(headers.get("x-api-key").map(|v| v.to_str().unwrap().to_string()));
    let left = s.failures.load(Ordering::SeqCst);
    if left > 0 {
        s.failures.store(left - 1, Ordering::SeqCst);
        return Err(StatusCode::SERVICE_UNAVAILABLE);
    }
    Ok(())
}

/// p_yes is 0.9 when the input ends with the label, else 0.2. Scores come
/// back in reverse order.
async fn score(State(s): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> Result<Json<Value>, StatusCode> {
    gate(&s, &headers)?;
    let mut scores: Vec<Value> = body["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|item| {
            let p = if item["input"].as_str().unwrap().ends_with(item["label"].as_str().unwrap()) { 0.9 } else { 0.2 };
            json!({"id": item["id"], "p_yes": p})
        })
        .collect();
    scores.reverse();
    Ok(Json(json!({ "scores": scores })))
}

async fn complete(State(s): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> Result<Json<Value>, StatusCode> {
    gate(&s, &headers)?;
    let text = format!("echo: {}", body["prompt"].as_str().unwrap());
    s.prompts.lock().unwrap().push(body);
    Ok(Json(json!({ "text": text })))
}

async fn embed(State(s): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> Result<Json<Value>, StatusCode> {
    gate(&s, &headers)?;
    let vectors: Vec<Value> = body["texts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| json!([t.as_str().unwrap().len() as f64, 1.0]))
        .collect();
    Ok(Json(json!({ "vectors": vectors })))
}

async fn garbage(State(s): State<Shared>, headers: HeaderMap) -> Result<String, StatusCode> {
    gate(&s, &headers)?;
    Ok("not json".into())
}

fn serve(router: Router<Shared>) -> (SocketAddr, Shared) {
    let state = Shared::default();
    let app = router.with_state(state.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), state)
}

fn model_server() -> (SocketAddr, Shared) {
    serve(
        Router::new()
            .route("/v1/score", post(score))
            .route("/v1/complete", post(complete))
            .route("/v1/embed", post(embed)),
    )
}

fn config(addr: SocketAddr) -> BackendConfig {
    let mut cfg = BackendConfig::http(format!("http://{addr}/"));
    cfg.batch_size = 7;
    cfg.max_concurrency = 3;
    cfg.retry = RetryPolicy {
        max_attempts: 3,
        base_backoff_ms: 1,
    };
    cfg
}

fn triplets(n: usize) -> Vec<TripletExample> {
    (0..n)
        .flat_map(|i| {
            ["A", "B", "C"].into_iter().map(move |label| TripletExample {
                triplet_id: triplet_id(&format!("i{i}"), label),
                instance_id: format!("i{i}"),
                instruction: "Choose.".into(),
                input: format!("gold is {}", ["A", "B", "C"][i % 3]),
                label: label.into(),
                polarity: Polarity::Unknown,
                group: FrequencyGroup::Freq,
            })
        })
        .collect()
}

#[test]
fn scores_come_back_in_input_order() {
    let (addr, server) = model_server();
    let input = triplets(20);
    let scores = score_triplets(&input, &config(addr)).unwrap();
    assert_eq!(server.requests.load(Ordering::SeqCst), 9);
    assert_eq!(scores.len(), input.len());
    for (rec, t) in scores.iter().zip(&input) {
        assert_eq!(rec.triplet_id, t.triplet_id);
        let expected = if t.input.ends_with(&t.label) { 0.9 } else { 0.2 };
        assert_eq!(rec.p_yes, expected);
    }
}

#[test]
fn transient_failures_are_retried() {
    let (addr, server) = model_server();
    server.failures.store(2, Ordering::SeqCst);
    let mut cfg = config(addr);
    cfg.max_concurrency = 1;
    assert_eq!(score_triplets(&triplets(3), &cfg).unwrap().len(), 9);
    assert_eq!(server.requests.load(Ordering::SeqCst), 4);
}

#[test]
fn exhausted_retries_report_unscored_ids() {
    let (addr, server) = model_server();
    server.failures.store(usize::MAX, Ordering::SeqCst);
    let mut cfg = config(addr);
    cfg.max_concurrency = 1;
    let err = score_triplets(&triplets(5), &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    match err {
        Error::BatchFailed { unfetched, .. } => assert_eq!(unfetched.len(), 15),
        other => panic!("unexpected error {other}"),
    }
    assert_eq!(server.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn unreachable_backend_is_a_backend_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut cfg = config(addr);
    cfg.retry.max_attempts = 1;
    let err = score_triplets(&triplets(1), &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let err = complete_text("hello", &CompletionParams::default(), &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn malformed_response_is_a_backend_error() {
    let (addr, _) = serve(Router::new().route("/v1/score", post(garbage)));
    let mut cfg = config(addr);
    cfg.retry.max_attempts = 1;
    let err = score_triplets(&triplets(1), &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn completion_sends_parameters_and_retries() {
    let (addr, server) = model_server();
    server.failures.store(1, Ordering::SeqCst);
    let params = CompletionParams {
        max_tokens: 64,
        temperature: 0.25,
    };
    let text = complete_text("event type: Attack\n", &params, &config(addr)).unwrap();
    assert_eq!(text, "echo: event type: Attack\n");
    let sent = server.prompts.lock().unwrap();
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0]["max_tokens"], 64);
    assert_eq!(sent[0]["temperature"], 0.25);
    assert!(complete_text("", &params, &config(addr)).is_err());
}

#[test]
fn embeddings_are_returned_per_text() {
    let (addr, _) = model_server();
    let texts = vec!["a".to_string(), "abc".to_string()];
    let vectors = embed_texts(&texts, &config(addr)).unwrap();
    assert_eq!(vectors, vec![vec![1.0, 1.0], vec![3.0, 1.0]]);
    assert!(embed_texts(&[], &config(addr)).is_err());
}

#[test]
fn auth_header_is_attached_from_environment() {
    std::env::set_var(ENV_AUTH_HEADER, "x-api-key");
    std::env::set_var(ENV_AUTH_TOKEN, "s3cret");
    let (addr, server) = model_server();
    score_triplets(&triplets(1), &config(addr)).unwrap();
    std::env::remove_var(ENV_AUTH_HEADER);
    std::env::remove_var(ENV_AUTH_TOKEN);
    let seen = server.auth.lock().unwrap();
    assert_eq!(seen.as_slice(), [Some("s3cret".to_string())]);
}
