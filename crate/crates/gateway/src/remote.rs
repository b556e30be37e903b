//! Client for OpenAI-style completion endpoints.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use xroute_core::{AdaptorError, ExpertAdaptor, ExpertReply, ExpertRequest};

use crate::config::RemoteEndpoint;

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    top_p: f64,
    logprobs: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    usage: Usage,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    token_logprobs: Vec<f64>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// POSTs `{model, prompt, max_tokens, temperature, top_p, logprobs}` and
/// reads `choices[0].text`, `usage` and, when present,
/// `choices[0].logprobs.token_logprobs`.
#[derive(Debug)]
pub struct RemoteAdaptor {
    name: String,
    endpoint: RemoteEndpoint,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteAdaptor {
    pub fn new(name: impl Into<String>, endpoint: RemoteEndpoint) -> Result<Self, String> {
        let api_key = match &endpoint.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            name: name.into(),
            endpoint,
            api_key,
            client,
        })
    }

    fn transport(&self, message: impl ToString) -> AdaptorError {
        AdaptorError::Transport {
            expert: self.name.clone(),
            message: message.to_string(),
        }
    }

    fn malformed(&self, message: impl ToString) -> AdaptorError {
        AdaptorError::Malformed {
            expert: self.name.clone(),
            message: message.to_string(),
        }
    }
}

impl ExpertAdaptor for RemoteAdaptor {
    fn name(&self) -> &str {
        &self.name
    }

    fn execute(&self, request: &ExpertRequest<'_>) -> Result<ExpertReply, AdaptorError> {
        let started = Instant::now();
        let mut call = self
            .client
            .post(&self.endpoint.url)
            .timeout(request.timeout)
            .json(&CompletionRequest {
                model: &self.endpoint.model,
                prompt: request.prompt,
                max_tokens: request.params.max_tokens,
                temperature: request.params.temperature,
                top_p: request.params.top_p,
                logprobs: 1,
            });
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() {
                AdaptorError::Timeout {
                    expert: self.name.clone(),
                    after: request.timeout,
                }
            } else {
                self.transport(e)
            }
        })?;
        if !resp.status().is_success() {
            return Err(self.transport(format!("HTTP {}", resp.status())));
        }
        let body: CompletionResponse = resp.json().map_err(|e| self.malformed(e))?;
        let elapsed = started.elapsed().max(Duration::from_micros(1));
        let choice = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| self.malformed("no choices"))?;
        let reply = ExpertReply {
            response_text: choice.text,
            input_tokens: body.usage.prompt_tokens,
            output_tokens: body.usage.completion_tokens,
            elapsed_seconds: elapsed.as_secs_f64(),
            token_logprobs: choice.logprobs.map(|l| l.token_logprobs),
        };
        reply.validate().map_err(|m| self.malformed(m))?;
        Ok(reply)
    }
}
