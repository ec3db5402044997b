//! Client side of the inference wire protocol (v1).
//!
//! An endpoint is addressed by a base URL; the gateway posts one JSON document
//! to `{base_url}/v1/predict` per call and probes `{base_url}/health`.
//! Ensembles are queried concurrently and fail closed: if any member fails,
//! the whole call fails and names that member.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;
use crate::model::{ExampleInputs, ModelPrediction, PredictedAnswer, PredictionPayload, TaskType};

pub const DEFAULT_TIMEOUT_MS: u64 = 5000;
/// Distributions whose mass is within this of 1 are renormalized.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointDescriptor {
    pub endpoint_id: String,
    pub base_url: String,
    pub task_type: TaskType,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub display_name: String,
}

impl EndpointDescriptor {
    pub fn new(endpoint_id: impl Into<String>, base_url: impl Into<String>, task_type: TaskType) -> Self {
        let endpoint_id = endpoint_id.into();
        EndpointDescriptor {
            display_name: endpoint_id.clone(),
            endpoint_id,
            base_url: base_url.into(),
            task_type,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }

    pub fn with_timeout(mut self, timeout_ms: u64) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }

    pub fn with_display_name(mut self, name: impl Into<String>) -> Self {
        self.display_name = name.into();
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

// Wire documents. Field names are part of the protocol.

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireInputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireOptions {
    #[serde(default)]
    pub attributions: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub task_type: TaskType,
    pub inputs: WireInputs,
    #[serde(default)]
    pub options: WireOptions,
}

impl PredictRequest {
    /// Builds the request for an example's inputs. Gold answers and claimed
    /// labels never go over the wire.
    pub fn for_example(inputs: &ExampleInputs, context: Option<&str>, want_attributions: bool) -> Self {
        let mut wire = WireInputs {
            context: context.map(str::to_owned),
            ..WireInputs::default()
        };
        let task_type = match inputs {
            ExampleInputs::Nli { hypothesis, .. } => {
                wire.hypothesis = Some(hypothesis.clone());
                TaskType::Classification
            }
            ExampleInputs::Qa { question, .. } => {
                wire.question = Some(question.clone());
                TaskType::SpanExtraction
            }
            ExampleInputs::Sentiment { text, .. } | ExampleInputs::Hate { text, .. } => {
                wire.text = Some(text.clone());
                TaskType::Classification
            }
        };
        PredictRequest {
            task_type,
            inputs: wire,
            options: WireOptions {
                attributions: want_attributions,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAnswer {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAttribution {
    pub token: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_probs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<WireAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributions: Option<Vec<WireAttribution>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
}

/// A token attribution with its raw score and its display score in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayAttribution {
    pub token: String,
    pub raw_score: f64,
    pub display_score: f64,
}

/// Scales scores by the largest magnitude so they fit [-1, 1]. An all-zero
/// list stays all zero.
pub fn normalize_attributions<S: AsRef<str>>(raw: &[(S, f64)]) -> Vec<DisplayAttribution> {
    let max = raw.iter().map(|(_, s)| s.abs()).fold(0.0, f64::max);
    raw.iter()
        .map(|(token, score)| DisplayAttribution {
            token: token.as_ref().to_owned(),
            raw_score: *score,
            display_score: if max > 0.0 { score / max } else { 0.0 },
        })
        .collect()
}

/// Checks a returned distribution and rescales it to sum to one.
pub fn normalize_distribution(
    endpoint_id: &str,
    probs: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, GatewayError> {
    let invalid = |message: String| GatewayError::DistributionInvalid {
        endpoint_id: endpoint_id.to_owned(),
        message,
    };
    if probs.is_empty() {
        return Err(invalid("empty distribution".into()));
    }
    if let Some((label, p)) = probs.iter().find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0) {
        return Err(invalid(format!("probability {p} for {label:?} is outside [0, 1]")));
    }
    let sum: f64 = probs.values().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE + 1e-12 {
        return Err(invalid(format!("probabilities sum to {sum}")));
    }
    Ok(probs.iter().map(|(k, p)| (k.clone(), p / sum)).collect())
}

/// Turns a raw wire response into a checked prediction.
pub fn interpret_response(
    endpoint: &EndpointDescriptor,
    response: PredictResponse,
    want_attributions: bool,
    latency_ms: u64,
) -> Result<ModelPrediction, GatewayError> {
    let id = endpoint.endpoint_id.as_str();
    let malformed = |message: &str| GatewayError::MalformedResponse {
        endpoint_id: id.to_owned(),
        message: message.to_owned(),
    };
    let payload = match (endpoint.task_type, response.label_probs, response.answer) {
        (TaskType::Classification, Some(probs), _) => {
            PredictionPayload::LabelProbs(normalize_distribution(id, &probs)?)
        }
        (TaskType::SpanExtraction, _, Some(a)) => {
            if !(0.0..=1.0).contains(&a.confidence) {
                return Err(GatewayError::DistributionInvalid {
                    endpoint_id: id.to_owned(),
                    message: format!("answer confidence {} is outside [0, 1]", a.confidence),
                });
            }
            if a.char_start > a.char_end {
                return Err(malformed("answer span ends before it starts"));
            }
            PredictionPayload::Answer(PredictedAnswer {
                text: a.text,
                char_start: a.char_start,
                char_end: a.char_end,
                confidence: a.confidence,
            })
        }
        (TaskType::Classification, None, _) => return Err(malformed("missing label_probs")),
        (TaskType::SpanExtraction, _, None) => return Err(malformed("missing answer")),
    };
    let attributions = match response.attributions {
        Some(raw) if want_attributions => {
            let pairs: Vec<(String, f64)> = raw.into_iter().map(|a| (a.token, a.score)).collect();
            if pairs.iter().any(|(_, s)| !s.is_finite()) {
                return Err(malformed("non-finite attribution score"));
            }
            Some(normalize_attributions(&pairs))
        }
        _ => None,
    };
    Ok(ModelPrediction {
        endpoint_id: id.to_owned(),
        payload,
        attributions,
        latency_ms,
    })
}

/// Shared HTTP client for model endpoints. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Gateway {
    client: reqwest::Client,
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        let client = reqwest::Client::builder()
            .no_proxy()
            .build()
            .expect("http client builds with static configuration");
        Gateway { client }
    }

    fn transport_error(endpoint: &EndpointDescriptor, err: reqwest::Error) -> GatewayError {
        if err.is_timeout() {
            GatewayError::Timeout {
                endpoint_id: endpoint.endpoint_id.clone(),
                timeout_ms: endpoint.timeout_ms,
            }
        } else if err.is_status() || err.is_decode() || err.is_body() {
            GatewayError::MalformedResponse {
                endpoint_id: endpoint.endpoint_id.clone(),
                message: err.to_string(),
            }
        } else {
            GatewayError::Unreachable {
                endpoint_id: endpoint.endpoint_id.clone(),
                message: err.to_string(),
            }
        }
    }

    async fn bounded<T, F>(endpoint: &EndpointDescriptor, fut: F) -> Result<T, GatewayError>
    where
        F: std::future::Future<Output = Result<T, GatewayError>>,
    {
        match tokio::time::timeout(Duration::from_millis(endpoint.timeout_ms), fut).await {
            Ok(r) => r,
            Err(_) => Err(GatewayError::Timeout {
                endpoint_id: endpoint.endpoint_id.clone(),
                timeout_ms: endpoint.timeout_ms,
            }),
        }
    }

    pub async fn health(&self, endpoint: &EndpointDescriptor) -> Result<(), GatewayError> {
        Self::bounded(endpoint, async {
            let resp = self
                .client
                .get(endpoint.url("/health"))
                .send()
                .await
                .and_then(|r| r.error_for_status())
                .map_err(|e| Self::transport_error(endpoint, e))?;
            let health: HealthResponse =
                resp.json().await.map_err(|e| Self::transport_error(endpoint, e))?;
            if health.status == "ok" {
                Ok(())
            } else {
                Err(GatewayError::Unreachable {
                    endpoint_id: endpoint.endpoint_id.clone(),
                    message: format!("health status {:?}", health.status),
                })
            }
        })
        .await
    }

    pub async fn predict(
        &self,
        endpoint: &EndpointDescriptor,
        request: &PredictRequest,
    ) -> Result<ModelPrediction, GatewayError> {
        if request.task_type != endpoint.task_type {
            return Err(GatewayError::MalformedResponse {
                endpoint_id: endpoint.endpoint_id.clone(),
                message: format!(
                    "endpoint serves {:?} but the request is {:?}",
                    endpoint.task_type, request.task_type
                ),
            });
        }
        let started = Instant::now();
        let body = Self::bounded(endpoint, async {
            let resp = self
                .client
                .post(endpoint.url("/v1/predict"))
                .json(request)
                .send()
                .await
                .and_then(|r| r.error_for_status())
                .map_err(|e| Self::transport_error(endpoint, e))?;
            resp.bytes().await.map_err(|e| Self::transport_error(endpoint, e))
        })
        .await?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let response: PredictResponse =
            serde_json::from_slice(&body).map_err(|e| GatewayError::MalformedResponse {
                endpoint_id: endpoint.endpoint_id.clone(),
                message: e.to_string(),
            })?;
        interpret_response(endpoint, response, request.options.attributions, latency_ms)
    }

    /// Queries every endpoint concurrently. Results keep the endpoint order.
    pub async fn predict_ensemble(
        &self,
        endpoints: &[EndpointDescriptor],
        request: &PredictRequest,
    ) -> Result<Vec<ModelPrediction>, GatewayError> {
        let results = join_all(endpoints.iter().map(|e| self.predict(e, request))).await;
        results
            .into_iter()
            .zip(endpoints)
            .map(|(r, e)| {
                r.map_err(|source| {
                    tracing::warn!(endpoint = %e.endpoint_id, err = %source, "ensemble member failed");
                    GatewayError::MemberFailure {
                        endpoint_id: e.endpoint_id.clone(),
                        source: Box::new(source),
                    }
                })
            })
            .collect()
    }
}
