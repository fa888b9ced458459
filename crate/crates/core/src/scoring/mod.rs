//! Scoring, completion and embedding backends.
//!
//! Every backend is described by a [`BackendConfig`]. Remote models sit
//! behind a small JSON-over-HTTP protocol (see [`http`]); the mock kinds are
//! deterministic and used by tests and dry runs.

mod cache;
mod engine;
pub mod http;
pub mod mock;

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ScoreRecord, TripletExample};

pub use cache::ScoreCache;
pub use engine::{score_with, BatchOptions, ScoringOutcome};

/// Produces `p_yes` for a batch of triplets. Records may come back in any
/// order; the engine matches them by id.
pub trait Scorer: Sync {
    /// Stable identity used to key the score cache.
    fn identity(&self) -> String;

    fn score_batch(&self, batch: &[TripletExample]) -> Result<Vec<ScoreRecord>>;

    /// Whole-input check run once before batching.
    fn precheck(&self, _triplets: &[TripletExample]) -> Result<()> {
        Ok(())
    }
}

pub trait Completer: Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String>;
}

pub trait Embedder: Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            max_tokens: 256,
            temperature: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    ScoreFile,
    OracleMock,
    HashMock,
    EchoMock,
}

impl BackendKind {
    pub fn is_remote(self) -> bool {
        self == BackendKind::Http
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 200,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16)))
    }
}

fn default_batch_size() -> usize {
    32
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_embed_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_map: Option<PathBuf>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Salt mixed into hash-mock scores.
    #[serde(default)]
    pub salt: String,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Score cache directory; remote backends only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

pub const ENV_BACKEND_URL: &str = "XSHOT_BACKEND_URL";
pub const ENV_AUTH_HEADER: &str = "XSHOT_AUTH_HEADER";
pub const ENV_AUTH_TOKEN: &str = "XSHOT_AUTH_TOKEN";

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            endpoint: None,
            score_path: None,
            gold_map: None,
            batch_size: default_batch_size(),
            max_concurrency: default_concurrency(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout_ms(),
            salt: String::new(),
            embed_dim: default_embed_dim(),
            cache_dir: None,
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        BackendConfig {
            endpoint: Some(endpoint.into()),
            ..BackendConfig::new(BackendKind::Http)
        }
    }

    pub fn oracle(gold_map: impl Into<PathBuf>) -> Self {
        BackendConfig {
            gold_map: Some(gold_map.into()),
            ..BackendConfig::new(BackendKind::OracleMock)
        }
    }

    pub fn score_file(path: impl Into<PathBuf>) -> Self {
        BackendConfig {
            score_path: Some(path.into()),
            ..BackendConfig::new(BackendKind::ScoreFile)
        }
    }

    /// Accepts a config file (`.json` / `.toml`), an `http(s)://` URL, or a
    /// bare mock kind such as `hash-mock`.
    pub fn resolve(spec: &str) -> Result<BackendConfig> {
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Ok(BackendConfig::http(spec));
        }
        match spec {
            "hash-mock" => return Ok(BackendConfig::new(BackendKind::HashMock)),
            "echo-mock" => return Ok(BackendConfig::new(BackendKind::EchoMock)),
            _ => {}
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: BackendConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_concurrency == 0 {
            return Err(Error::Config("batch_size and max_concurrency must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config("retry.max_attempts must be at least 1".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint().is_none() => Err(Error::Config(format!(
                "http backend needs an endpoint (or {ENV_BACKEND_URL})"
            ))),
            BackendKind::ScoreFile if self.score_path.is_none() => {
                Err(Error::Config("score-file backend needs score_path".into()))
            }
            BackendKind::OracleMock if self.gold_map.is_none() => {
                Err(Error::Config("oracle-mock backend needs gold_map".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn endpoint(&self) -> Option<String> {
        self.endpoint.clone().or_else(|| std::env::var(ENV_BACKEND_URL).ok())
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            batch_size: self.batch_size,
            max_concurrency: self.max_concurrency,
            retry: self.retry.clone(),
        }
    }

    pub fn scorer(&self) -> Result<Box<dyn Scorer>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Http => Box::new(http::HttpBackend::new(self)?),
            BackendKind::ScoreFile => Box::new(mock::ScoreFileScorer::load(self.score_path.as_deref().unwrap_or(Path::new("")))?),
            BackendKind::OracleMock => Box::new(mock::OracleScorer::load(self.gold_map.as_deref().unwrap_or(Path::new("")))?),
            BackendKind::HashMock => Box::new(mock::HashScorer::new(self.salt.clone())),
            BackendKind::EchoMock => {
                return Err(Error::Config("echo-mock backend does not score triplets".into()))
            }
        })
    }

    pub fn completer(&self) -> Result<Box<dyn Completer>> {
        self.validate()?;
        match self.kind {
            BackendKind::Http => Ok(Box::new(http::HttpBackend::new(self)?)),
            BackendKind::ScoreFile => Err(Error::Config("score-file backend cannot complete text".into())),
            _ => Ok(Box::new(mock::EchoCompleter)),
        }
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        match self.kind {
            BackendKind::Http => Ok(Box::new(http::HttpBackend::new(self)?)),
            BackendKind::ScoreFile => Err(Error::Config("score-file backend cannot embed text".into())),
            _ => Ok(Box::new(mock::HashedBagOfWords::new(self.embed_dim))),
        }
    }
}

/// Scores triplets with the configured backend; output order matches input.
pub fn score_triplets(triplets: &[TripletExample], cfg: &BackendConfig) -> Result<Vec<ScoreRecord>> {
    let scorer = cfg.scorer()?;
    let cache = match (&cfg.cache_dir, cfg.kind.is_remote()) {
        (Some(dir), true) => Some(ScoreCache::open(dir)?),
        _ => None,
    };
    Ok(score_with(scorer.as_ref(), triplets, &cfg.batch_options(), cache.as_ref())?.scores)
}

pub fn complete_text(prompt: &str, params: &CompletionParams, cfg: &BackendConfig) -> Result<String> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    cfg.completer()?.complete(prompt, params)
}

pub fn embed_texts(texts: &[String], cfg: &BackendConfig) -> Result<Vec<Vec<f64>>> {
    embed_with(cfg.embedder()?.as_ref(), texts)
}

/// Embeds and checks that every vector has the same, non-zero dimension.
pub fn embed_with(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Vec<f64>>> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("nothing to embed".into()));
    }
    let vectors = embedder.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(Error::Backend {
            message: format!("asked for {} embeddings, got {}", texts.len(), vectors.len()),
            attempts: 1,
        });
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Backend {
            message: "embedding backend returned inconsistent dimensions".into(),
            attempts: 1,
        });
    }
    Ok(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(BackendConfig::new(BackendKind::OracleMock).validate().is_err());
        assert!(BackendConfig::new(BackendKind::ScoreFile).validate().is_err());
        assert!(BackendConfig::new(BackendKind::HashMock).validate().is_ok());
        let mut c = BackendConfig::new(BackendKind::HashMock);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn resolve_shorthands_and_files() {
        assert_eq!(BackendConfig::resolve("hash-mock").unwrap().kind, BackendKind::HashMock);
        let h = BackendConfig::resolve("http://localhost:9/").unwrap();
        assert_eq!(h.kind, BackendKind::Http);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.toml");
        std::fs::write(&p, "kind = \"hash-mock\"\nsalt = \"s\"\nbatch_size = 7\n[retry]\nmax_attempts = 2\nbase_backoff_ms = 1\n").unwrap();
        let c = BackendConfig::resolve(p.to_str().unwrap()).unwrap();
        assert_eq!((c.batch_size, c.retry.max_attempts, c.salt.as_str()), (7, 2, "s"));
        let j = dir.path().join("b.json");
        std::fs::write(&j, r#"{"kind":"oracle-mock"}"#).unwrap();
        assert!(matches!(BackendConfig::resolve(j.to_str().unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn backoff_doubles() {
        let r = RetryPolicy { max_attempts: 4, base_backoff_ms: 10 };
        assert_eq!(r.backoff(1), Duration::from_millis(10));
        assert_eq!(r.backoff(3), Duration::from_millis(40));
    }

    #[test]
    fn empty_prompt_rejected_before_dispatch() {
        let cfg = BackendConfig::http("http://127.0.0.1:1");
        assert!(matches!(complete_text("", &CompletionParams::default(), &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn embed_contract() {
        let cfg = BackendConfig::new(BackendKind::HashMock);
        assert!(embed_texts(&[], &cfg).is_err());
        let v = embed_texts(&["same text".into(), "same text".into(), "other".into()], &cfg).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[0].len(), 256);
        struct Ragged;
        impl Embedder for Ragged {
            fn embed(&self, _t: &[String]) -> Result<Vec<Vec<f64>>> {
                Ok(vec![vec![1.0], vec![1.0, 2.0]])
            }
        }
        assert!(embed_with(&Ragged, &["a".into(), "b".into()]).is_err());
    }
}
