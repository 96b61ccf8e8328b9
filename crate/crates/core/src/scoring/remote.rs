//! JSON-over-HTTP client for an external masked-LM scorer.
//!
//! Request body: `{"rendered_prompt": str, "label_words": [str], "want_features": bool}`.
//! Response body: `{"log_probs": [float], "features": [float]?}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{FeatureBuilder, ScoreRequest, Scorer, ScorerObservation, ScoringError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub rendered_prompt: String,
    pub label_words: Vec<String>,
    pub want_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub log_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first failure.
    pub retries: usize,
    pub retry_backoff_ms: u64,
    pub feature_dim: usize,
    pub want_features: bool,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, feature_dim: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: 10_000,
            retries: 2,
            retry_backoff_ms: 100,
            feature_dim,
            want_features: true,
        }
    }
}

pub struct RemoteScorer {
    config: RemoteConfig,
    agent: ureq::Agent,
    fallback: FeatureBuilder,
}

impl std::fmt::Debug for RemoteScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteScorer").field("config", &self.config).finish()
    }
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        let fallback = FeatureBuilder::new(config.feature_dim);
        Self {
            config,
            agent,
            fallback,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, body: &str) -> Result<WireResponse, ScoringError> {
        let unavailable = |message: String| ScoringError::ScorerUnavailable {
            attempts: 1,
            message,
        };
        let response = match self
            .agent
            .post(&self.config.endpoint)
            .set("Content-Type", "application/json")
            .send_string(body)
        {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) if code >= 500 => {
                return Err(unavailable(format!("HTTP {code}: {}", r.status_text())))
            }
            Err(ureq::Error::Status(code, r)) => {
                return Err(ScoringError::ProtocolError(format!(
                    "HTTP {code}: {}",
                    r.status_text()
                )))
            }
            Err(ureq::Error::Transport(t)) => return Err(unavailable(t.to_string())),
        };
        let text = response
            .into_string()
            .map_err(|e| unavailable(format!("reading body: {e}")))?;
        serde_json::from_str(&text).map_err(|e| ScoringError::ProtocolError(e.to_string()))
    }

    /// Sends one request, retrying transport failures and 5xx replies.
    pub fn score_text(&self, rendered: &str, label_words: &[&str]) -> Result<WireResponse, ScoringError> {
        let request = WireRequest {
            rendered_prompt: rendered.to_string(),
            label_words: label_words.iter().map(|w| w.to_string()).collect(),
            want_features: self.config.want_features,
        };
        let body = serde_json::to_string(&request).expect("wire request serializes");
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.retry_backoff_ms * attempt as u64));
            }
            match self.attempt(&body) {
                Ok(resp) => return Ok(resp),
                Err(ScoringError::ScorerUnavailable { message, .. }) => {
                    log::warn!("scorer attempt {} of {attempts} failed: {message}", attempt + 1);
                    last = message;
                }
                Err(e) => return Err(e),
            }
        }
        Err(ScoringError::ScorerUnavailable {
            attempts,
            message: last,
        })
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<ScorerObservation, ScoringError> {
        let words = request.task.label_words(request.state.query_verbalizer());
        let response = self.score_text(request.rendered, &words)?;
        let features = match response.features {
            Some(f) => f,
            None => {
                self.fallback.check(request.task)?;
                self.fallback.build(request.state, request.task, request.pool)
            }
        };
        let obs = ScorerObservation {
            label_log_probs: response.log_probs,
            features,
        };
        obs.check(words.len(), self.config.feature_dim)?;
        Ok(obs)
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }
}
