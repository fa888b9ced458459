//! JSON-over-HTTP model backend.
//!
//! | route           | request                                             | response                         |
//! |-----------------|-----------------------------------------------------|----------------------------------|
//! | `POST /v1/score`    | `{"items": [{"id", "instruction", "input", "label"}]}` | `{"scores": [{"id", "p_yes"}]}` |
//! | `POST /v1/complete` | `{"prompt", "max_tokens", "temperature"}`             | `{"text"}`                       |
//! | `POST /v1/embed`    | `{"texts": [..]}`                                     | `{"vectors": [[..]]}`            |
//!
//! An auth header is attached when `XSHOT_AUTH_HEADER` and `XSHOT_AUTH_TOKEN`
//! are both set.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendConfig, CompletionParams, Completer, Embedder, RetryPolicy, Scorer, ENV_AUTH_HEADER, ENV_AUTH_TOKEN};
use crate::error::{Error, Result};
use crate::model::{ScoreRecord, TripletExample};

#[derive(Serialize)]
pub struct ScoreItem<'a> {
    pub id: &'a str,
    pub instruction: &'a str,
    pub input: &'a str,
    pub label: &'a str,
}

#[derive(Serialize)]
pub struct ScoreRequest<'a> {
    pub items: Vec<ScoreItem<'a>>,
}

#[derive(Debug, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<ScoreEntry>,
}

#[derive(Debug, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub p_yes: f64,
}

#[derive(Serialize)]
pub struct CompleteRequest<'a> {
    pub prompt: &'a str,
    pub max_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
}

#[derive(Serialize)]
pub struct EmbedRequest<'a> {
    pub texts: &'a [String],
}

#[derive(Debug, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: Client,
    base: String,
    auth: Option<(String, String)>,
    retry: RetryPolicy,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self> {
        let base = cfg
            .endpoint()
            .ok_or_else(|| Error::Config("http backend has no endpoint".into()))?
            .trim_end_matches('/')
            .to_string();
        let client = Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let auth = match (std::env::var(ENV_AUTH_HEADER), std::env::var(ENV_AUTH_TOKEN)) {
            (Ok(h), Ok(t)) if !h.is_empty() => Some((h, t)),
            _ => None,
        };
        Ok(HttpBackend {
            client,
            base,
            auth,
            retry: cfg.retry.clone(),
        })
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, route: &str, body: &B) -> Result<R> {
        let url = format!("{}{route}", self.base);
        let mut req = self.client.post(&url).json(body);
        if let Some((h, t)) = &self.auth {
            req = req.header(h.as_str(), t.as_str());
        }
        let backend = |message: String| Error::Backend { message, attempts: 1 };
        let resp = req.send().map_err(|e| backend(format!("{url}: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(backend(format!("{url}: HTTP {status}")));
        }
        resp.json().map_err(|e| backend(format!("{url}: bad response body: {e}")))
    }

    /// Calls `post` under the retry policy; used for the unbatched routes.
    fn post_retrying<B: Serialize, R: DeserializeOwned>(&self, route: &str, body: &B) -> Result<R> {
        let mut attempt = 1;
        loop {
            match self.post(route, body) {
                Ok(r) => return Ok(r),
                Err(Error::Backend { message, .. }) if attempt >= self.retry.max_attempts => {
                    return Err(Error::Backend { message, attempts: attempt })
                }
                Err(e @ Error::Backend { .. }) => {
                    log::warn!("{route} attempt {attempt} failed: {e}");
                    std::thread::sleep(self.retry.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl Scorer for HttpBackend {
    fn identity(&self) -> String {
        format!("http:{}", self.base)
    }

    fn score_batch(&self, batch: &[TripletExample]) -> Result<Vec<ScoreRecord>> {
        let body = ScoreRequest {
            items: batch
                .iter()
                .map(|t| ScoreItem {
                    id: &t.triplet_id,
                    instruction: &t.instruction,
                    input: &t.input,
                    label: &t.label,
                })
                .collect(),
        };
        let resp: ScoreResponse = self.post("/v1/score", &body)?;
        resp.scores
            .into_iter()
            .map(|s| ScoreRecord::new(s.id, s.p_yes))
            .collect()
    }
}

impl Completer for HttpBackend {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String> {
        let body = CompleteRequest {
            prompt,
            max_tokens: params.max_tokens,
            temperature: params.temperature,
        };
        let resp: CompleteResponse = self.post_retrying("/v1/complete", &body)?;
        Ok(resp.text)
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbedResponse = self.post_retrying("/v1/embed", &EmbedRequest { texts })?;
        Ok(resp.vectors)
    }
}
