//! Thin HTTP client for a remote multimodal model.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::source::{AttributeSource, Query};
use crate::attributes::AttributeOrigin;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: f64,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/describe".into(),
            token_env: "ATTRSHIELD_MLLM_TOKEN".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Serialize)]
struct RequestBody<'a> {
    prompt: &'a str,
    images: Vec<String>,
}

#[derive(Deserialize)]
struct ResponseBody {
    response: String,
}

pub struct ExternalClient {
    config: ClientConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

impl ExternalClient {
    /// A missing token variable is allowed; requests then go out unauthenticated.
    pub fn new(config: ClientConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::config("external client endpoint is empty"));
        }
        if !(config.timeout_secs > 0.0) {
            return Err(Error::config("external client timeout must be positive"));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Ok(Self { config, agent, token })
    }

    fn attempt(&self, body: &RequestBody<'_>) -> std::result::Result<String, String> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| format!("request failed: {e}"))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| format!("unreadable body: {e}"))?;
        if status != 200 {
            return Err(format!("status {status}: {}", text.chars().take(200).collect::<String>()));
        }
        let parsed: ResponseBody = serde_json::from_str(&text).map_err(|e| format!("bad response json: {e}"))?;
        if parsed.response.trim().is_empty() {
            return Err("empty response (refusal?)".into());
        }
        Ok(parsed.response)
    }
}

impl AttributeSource for ExternalClient {
    fn origin(&self) -> AttributeOrigin {
        AttributeOrigin::ExternalClient
    }

    fn ask(&mut self, q: &Query<'_>) -> Result<String> {
        let images = q
            .images
            .iter()
            .map(|img| Ok(base64::engine::general_purpose::STANDARD.encode(img.encode_png()?)))
            .collect::<Result<Vec<_>>>()?;
        let body = RequestBody {
            prompt: &q.prompt,
            images,
        };
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms * attempt as u64));
            }
            match self.attempt(&body) {
                Ok(r) => {
                    log::debug!("{:?} for '{}': {}", q.question, q.category, r);
                    return Ok(r);
                }
                Err(e) => {
                    log::warn!("attempt {} for '{}' failed: {e}", attempt + 1, q.category);
                    last = e;
                }
            }
        }
        Err(Error::Source {
            message: format!(
                "{:?} for '{}' failed after {} attempts: {last}",
                q.question,
                q.category,
                self.config.max_retries + 1
            ),
            partial: Vec::new(),
        })
    }
}
