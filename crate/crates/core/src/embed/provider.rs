use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, DenseVector, EmbedError};
use crate::hash::{derive_seed, fnv1a};

pub const DEFAULT_STUB_DIMENSION: usize = 256;

/// A sentence encoder. Implementations must be deterministic per text and
/// always return `dimension()` values.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<DenseVector, EmbedError>;
}

/// Embed and check the advertised dimension.
pub fn embed(text: &str, provider: &dyn EmbeddingProvider) -> Result<DenseVector, EmbedError> {
    let v = provider.embed(text)?;
    if v.len() != provider.dimension() {
        return Err(EmbedError::DimensionMismatch {
            left: v.len(),
            right: provider.dimension(),
        });
    }
    Ok(v)
}

/// Offline encoder: every token maps to a fixed pseudo-random direction and a
/// text embeds as the mean of its token directions. Equal token multisets
/// give equal vectors, and disjoint token sets are nearly orthogonal.
#[derive(Debug, Clone)]
pub struct StubProvider {
    model: String,
    dimension: usize,
    salt: u64,
}

impl StubProvider {
    pub fn new(model: impl Into<String>, dimension: usize) -> Self {
        assert!(dimension > 0, "stub dimension must be positive");
        let model = model.into();
        let salt = fnv1a(model.as_bytes());
        Self {
            model,
            dimension,
            salt,
        }
    }

    fn accumulate(&self, token: &str, acc: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.salt, token));
        for slot in acc.iter_mut() {
            *slot += rng.random_range(-1.0..1.0);
        }
    }
}

impl Default for StubProvider {
    fn default() -> Self {
        Self::new("stub", DEFAULT_STUB_DIMENSION)
    }
}

impl EmbeddingProvider for StubProvider {
    fn name(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<DenseVector, EmbedError> {
        let mut tokens = tokenize(text);
        let mut acc = vec![0.0; self.dimension];
        if tokens.is_empty() {
            return Ok(acc);
        }
        // Summation order must not depend on token order.
        tokens.sort_unstable();
        for t in &tokens {
            self.accumulate(t, &mut acc);
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|x| *x /= n);
        Ok(acc)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbedResponse {
    Flat { embedding: Vec<f64> },
    Listed { data: Vec<EmbedDatum> },
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Remote encoder speaking `{"model", "input"} -> {"embedding": [...]}`
/// (an OpenAI-style `{"data": [{"embedding": [...]}]}` reply is accepted too).
#[derive(Debug)]
pub struct HttpProvider {
    url: String,
    model: String,
    dimension: usize,
    attempts: u32,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        dimension: usize,
        timeout: Duration,
        attempts: u32,
    ) -> Result<Self, EmbedError> {
        let model = model.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Provider {
                provider: model.clone(),
                message: e.to_string(),
                attempts: 0,
                retryable: false,
                retry_after: None,
            })?;
        Ok(Self {
            url: url.into(),
            model,
            dimension,
            attempts: attempts.max(1),
            client,
        })
    }

    fn call_once(&self, text: &str) -> Result<DenseVector, (String, bool, Option<Duration>)> {
        let resp = self
            .client
            .post(&self.url)
            .json(&EmbedRequest {
                model: &self.model,
                input: text,
            })
            .send()
            .map_err(|e| (e.to_string(), e.is_timeout() || e.is_connect(), None))?;
        let status = resp.status();
        if !status.is_success() {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse::<u64>().ok())
                .map(Duration::from_secs);
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err((format!("HTTP {status}"), retryable, retry_after));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| (format!("malformed response: {e}"), false, None))?;
        let v = match body {
            EmbedResponse::Flat { embedding } => embedding,
            EmbedResponse::Listed { mut data } if !data.is_empty() => data.swap_remove(0).embedding,
            EmbedResponse::Listed { .. } => {
                return Err(("response carried no embedding".into(), false, None))
            }
        };
        if v.len() != self.dimension {
            return Err((
                format!("expected {} values, got {}", self.dimension, v.len()),
                false,
                None,
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(("non-finite embedding value".into(), false, None));
        }
        Ok(v)
    }
}

impl EmbeddingProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<DenseVector, EmbedError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.call_once(text) {
                Ok(v) => return Ok(v),
                Err((message, retryable, retry_after)) => {
                    if !retryable || attempt >= self.attempts {
                        return Err(EmbedError::Provider {
                            provider: self.model.clone(),
                            message,
                            attempts: attempt,
                            retryable,
                            retry_after,
                        });
                    }
                    tracing::warn!(provider = %self.model, attempt, %message, "embedding call failed, retrying");
                    std::thread::sleep(retry_after.unwrap_or(Duration::from_millis(100)));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Stub,
    Http,
}

/// Serializable description of an embedding provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub model: String,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
    #[serde(default = "default_attempts")]
    pub attempts: u32,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_attempts() -> u32 {
    2
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Stub,
            model: "stub".into(),
            dimension: DEFAULT_STUB_DIMENSION,
            url: None,
            timeout_seconds: default_timeout(),
            attempts: default_attempts(),
        }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, EmbedError> {
        if self.dimension == 0 {
            return Err(EmbedError::Format(
                "provider dimension must be positive".into(),
            ));
        }
        match self.kind {
            ProviderKind::Stub => Ok(Arc::new(StubProvider::new(&self.model, self.dimension))),
            ProviderKind::Http => {
                let url = self
                    .url
                    .as_deref()
                    .ok_or_else(|| EmbedError::Format("http provider needs a url".into()))?;
                Ok(Arc::new(HttpProvider::new(
                    url,
                    &self.model,
                    self.dimension,
                    Duration::from_secs_f64(self.timeout_seconds),
                    self.attempts,
                )?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cosine;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn stub_is_deterministic() {
        let p = StubProvider::default();
        assert_eq!(p.embed("same text").unwrap(), p.embed("same text").unwrap());
    }

    #[test]
    fn stub_depends_only_on_token_multiset() {
        let p = StubProvider::new("stub", 64);
        assert_eq!(p.embed("b a, A!").unwrap(), p.embed("a a b").unwrap(),);
        assert_ne!(p.embed("a b").unwrap(), p.embed("a a b").unwrap());
    }

    #[test]
    fn stub_dimension_is_fixed() {
        let p = StubProvider::new("stub", 17);
        for text in ["", "one", "a much longer sentence with many words"] {
            assert_eq!(embed(text, &p).unwrap().len(), 17);
        }
    }

    #[test]
    fn stub_disjoint_texts_are_nearly_orthogonal() {
        let p = StubProvider::default();
        let a = p.embed("kinase protein enzyme cell membrane").unwrap();
        let b = p.embed("integer loop python function return").unwrap();
        assert!(cosine(&a, &b).unwrap().value.abs() < 0.2);
    }

    /// Serves one canned HTTP response and returns the request body it saw.
    fn one_shot_server(status: &str, body: &str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let response = format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            stream.write_all(response.as_bytes()).unwrap();
            String::from_utf8(body).unwrap()
        });
        (format!("http://{addr}/embed"), handle)
    }

    #[test]
    fn http_provider_speaks_wire_contract() {
        let (url, server) = one_shot_server("200 OK", r#"{"embedding":[0.5,-1.0,2.0]}"#);
        let p = HttpProvider::new(url, "mini", 3, Duration::from_secs(5), 1).unwrap();
        assert_eq!(p.embed("hello").unwrap(), vec![0.5, -1.0, 2.0]);
        let seen: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(seen["model"], "mini");
        assert_eq!(seen["input"], "hello");
    }

    #[test]
    fn http_provider_reports_failures_with_retry_metadata() {
        let (url, server) = one_shot_server("503 Service Unavailable", "{}");
        let p = HttpProvider::new(url, "mini", 3, Duration::from_secs(5), 1).unwrap();
        match p.embed("hello") {
            Err(EmbedError::Provider {
                attempts,
                retryable,
                ..
            }) => {
                assert_eq!(attempts, 1);
                assert!(retryable);
            }
            other => panic!("unexpected {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn http_provider_rejects_wrong_dimension() {
        let (url, server) = one_shot_server("200 OK", r#"{"data":[{"embedding":[1.0]}]}"#);
        let p = HttpProvider::new(url, "mini", 3, Duration::from_secs(5), 1).unwrap();
        assert!(matches!(
            p.embed("x"),
            Err(EmbedError::Provider {
                retryable: false,
                ..
            })
        ));
        server.join().unwrap();
    }
}
