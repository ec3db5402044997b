//! Deterministic stand-in models for the four task kinds, served over the
//! same wire protocol as any real endpoint. Each one is simple enough to fool
//! on purpose, so the whole loop can be exercised without external models.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;

use axum::extract::Json;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::Router;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::fooling::normalize_answer;
use crate::gateway::{
    EndpointDescriptor, HealthResponse, PredictRequest, PredictResponse, WireAnswer, WireAttribution,
};
use crate::model::TaskType;

pub const SENTIMENT_LABELS: [&str; 3] = ["positive", "negative", "neutral"];
pub const NLI_LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];
pub const HATE_LABELS: [&str; 2] = ["hateful", "not_hateful"];

const NEGATIONS: [&str; 3] = ["not", "no", "never"];
const ENTAILMENT_OVERLAP: f64 = 0.75;
const QA_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub positive: HashSet<String>,
    pub negative: HashSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let set = |words: &[&str]| words.iter().map(|w| w.to_string()).collect();
        Lexicon {
            positive: set(&["good", "great", "love", "excellent"]),
            negative: set(&["bad", "terrible", "hate", "awful"]),
        }
    }
}

/// Placeholder trigger words for the hate model. They are nonsense tokens.
pub const HATE_KEYWORDS: [&str; 4] = ["zorblax", "vexnar", "grimbly", "quozzle"];

/// A model output: label distribution plus raw per-token attributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub probs: BTreeMap<String, f64>,
    pub attributions: Vec<(String, f64)>,
}

fn labelled(labels: &[&str], values: [f64; 3]) -> BTreeMap<String, f64> {
    labels.iter().zip(values).map(|(l, v)| (l.to_string(), v)).collect()
}

fn softmax3(x: [f64; 3]) -> [f64; 3] {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = x.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Lexicon score `s = #positive - #negative`; softmax over `(s, -s, 0)`, or a
/// neutral-leaning `(0.2, 0.2, 0.6)` when `s = 0`.
pub fn sentiment_predict(text: &str, lexicon: &Lexicon) -> ClassifierOutput {
    let tokens = normalize_answer(text);
    let mut s: i64 = 0;
    let mut attributions = Vec::with_capacity(tokens.len());
    for t in tokens.tokens() {
        let score = if lexicon.positive.contains(t) {
            1.0
        } else if lexicon.negative.contains(t) {
            -1.0
        } else {
            0.0
        };
        s += score as i64;
        attributions.push((t.clone(), score));
    }
    let probs = if s == 0 {
        [0.2, 0.2, 0.6]
    } else {
        let s = s as f64;
        softmax3([s, -s, 0.0])
    };
    ClassifierOutput {
        probs: labelled(&SENTIMENT_LABELS, probs),
        attributions,
    }
}

/// Any keyword hit makes the statement hateful.
pub fn hate_predict(text: &str, keywords: &[&str]) -> ClassifierOutput {
    let tokens = normalize_answer(text);
    let mut hits = 0;
    let attributions = tokens
        .tokens()
        .iter()
        .map(|t| {
            let hit = keywords.contains(&t.as_str());
            hits += hit as usize;
            (t.clone(), if hit { 1.0 } else { 0.0 })
        })
        .collect();
    let p_hateful = if hits > 0 { 0.9 } else { 0.1 };
    ClassifierOutput {
        probs: [
            (HATE_LABELS[0].to_string(), p_hateful),
            (HATE_LABELS[1].to_string(), 1.0 - p_hateful),
        ]
        .into_iter()
        .collect(),
        attributions,
    }
}

fn concentrated(labels: &[&str; 3], chosen: usize, mass: f64) -> BTreeMap<String, f64> {
    let rest = (1.0 - mass) / 2.0;
    let mut values = [rest; 3];
    values[chosen] = mass;
    labelled(labels, values)
}

/// Overlap heuristic: negation means contradiction, high lexical overlap
/// means entailment, anything else is neutral.
pub fn nli_predict(context: &str, hypothesis: &str) -> ClassifierOutput {
    let ctx: HashSet<String> = normalize_answer(context).tokens().iter().cloned().collect();
    let hyp = normalize_answer(hypothesis);
    let attributions: Vec<(String, f64)> = hyp
        .tokens()
        .iter()
        .map(|t| {
            let score = if NEGATIONS.contains(&t.as_str()) {
                -1.0
            } else if ctx.contains(t) {
                1.0
            } else {
                0.0
            };
            (t.clone(), score)
        })
        .collect();
    let negated = hyp.tokens().iter().any(|t| NEGATIONS.contains(&t.as_str()));
    let overlap = if hyp.is_empty() {
        0.0
    } else {
        hyp.tokens().iter().filter(|t| ctx.contains(*t)).count() as f64 / hyp.len() as f64
    };
    let chosen = if negated {
        1
    } else if overlap >= ENTAILMENT_OVERLAP {
        0
    } else {
        2
    };
    ClassifierOutput {
        probs: concentrated(&NLI_LABELS, chosen, 0.7),
        attributions,
    }
}

/// Hypothesis-only heuristic: negation means contradiction, very short
/// hypotheses are entailed, everything else is neutral. Ignores the context.
pub fn nli_hypothesis_only_predict(hypothesis: &str) -> ClassifierOutput {
    let hyp = normalize_answer(hypothesis);
    let negated = hyp.tokens().iter().any(|t| NEGATIONS.contains(&t.as_str()));
    let chosen = if negated {
        1
    } else if !hyp.is_empty() && hyp.len() <= 3 {
        0
    } else {
        2
    };
    let attributions = hyp
        .tokens()
        .iter()
        .map(|t| (t.clone(), if NEGATIONS.contains(&t.as_str()) { -1.0 } else { 0.0 }))
        .collect();
    ClassifierOutput {
        probs: concentrated(&NLI_LABELS, chosen, 0.6),
        attributions,
    }
}

/// Whitespace-delimited tokens of `text` with their char offsets.
fn raw_tokens(text: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None; // (char index, byte index)
    let mut char_idx = 0;
    for (byte_idx, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some((cs, bs)) = start.take() {
                out.push((cs, char_idx, &text[bs..byte_idx]));
            }
        } else if start.is_none() {
            start = Some((char_idx, byte_idx));
        }
        char_idx += 1;
    }
    if let Some((cs, bs)) = start {
        out.push((cs, char_idx, &text[bs..]));
    }
    out
}

/// Picks the 3-token window whose own tokens plus the 3 tokens before it
/// share the most tokens with the question. First window wins ties.
pub fn qa_predict(context: &str, question: &str) -> (WireAnswer, Vec<(String, f64)>) {
    let question_tokens = normalize_answer(question);
    let wanted: HashSet<&str> = question_tokens.tokens().iter().map(String::as_str).collect();
    let tokens = raw_tokens(context);
    let matches: Vec<bool> = tokens
        .iter()
        .map(|(_, _, raw)| {
            normalize_answer(raw)
                .tokens()
                .first()
                .is_some_and(|t| wanted.contains(t.as_str()))
        })
        .collect();

    let context_vocab: HashSet<String> = normalize_answer(context).tokens().iter().cloned().collect();
    let attributions = question_tokens
        .tokens()
        .iter()
        .map(|t| (t.clone(), if context_vocab.contains(t) { 1.0 } else { 0.0 }))
        .collect();

    if tokens.is_empty() {
        let answer = WireAnswer {
            text: String::new(),
            char_start: 0,
            char_end: 0,
            confidence: 0.0,
        };
        return (answer, attributions);
    }

    let width = QA_WINDOW.min(tokens.len());
    let mut best = (0usize, 0usize);
    for start in 0..=tokens.len() - width {
        let from = start.saturating_sub(QA_WINDOW);
        let score = matches[from..start + width].iter().filter(|m| **m).count();
        if score > best.1 {
            best = (start, score);
        }
    }
    let (start, score) = best;
    let char_start = tokens[start].0;
    let char_end = tokens[start + width - 1].1;
    let text = crate::model::char_slice(context, char_start, char_end)
        .expect("token offsets lie inside the context")
        .to_owned();
    let answer = WireAnswer {
        text,
        char_start,
        char_end,
        confidence: score as f64 / (2 * QA_WINDOW) as f64,
    };
    (answer, attributions)
}

/// The reference models, each mounted under `/models/{path}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReferenceModel {
    Sentiment,
    Hate,
    Nli,
    NliHypothesisOnly,
    Qa,
}

impl ReferenceModel {
    pub const ALL: [ReferenceModel; 5] = [
        ReferenceModel::Sentiment,
        ReferenceModel::Hate,
        ReferenceModel::Nli,
        ReferenceModel::NliHypothesisOnly,
        ReferenceModel::Qa,
    ];

    pub fn path(self) -> &'static str {
        match self {
            ReferenceModel::Sentiment => "sentiment",
            ReferenceModel::Hate => "hate",
            ReferenceModel::Nli => "nli",
            ReferenceModel::NliHypothesisOnly => "nli-hyp",
            ReferenceModel::Qa => "qa",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ReferenceModel::Sentiment => "lexicon sentiment classifier",
            ReferenceModel::Hate => "keyword hate classifier",
            ReferenceModel::Nli => "lexical-overlap NLI",
            ReferenceModel::NliHypothesisOnly => "hypothesis-only NLI",
            ReferenceModel::Qa => "sliding-window QA",
        }
    }

    pub fn task_type(self) -> TaskType {
        match self {
            ReferenceModel::Qa => TaskType::SpanExtraction,
            _ => TaskType::Classification,
        }
    }

    /// Descriptor for this model served by a process reachable at `origin`
    /// (e.g. `http://127.0.0.1:8080`).
    pub fn endpoint(self, origin: &str) -> EndpointDescriptor {
        EndpointDescriptor::new(
            format!("ref-{}", self.path()),
            format!("{}/models/{}", origin.trim_end_matches('/'), self.path()),
            self.task_type(),
        )
        .with_display_name(self.display_name())
    }

    /// Runs the model on a wire request.
    pub fn respond(self, request: &PredictRequest) -> Result<PredictResponse, String> {
        if request.task_type != self.task_type() {
            return Err(format!("this model serves {:?}", self.task_type()));
        }
        let need = |field: &Option<String>, name: &str| {
            field.clone().ok_or_else(|| format!("missing inputs.{name}"))
        };
        let inputs = &request.inputs;
        let (label_probs, answer, attributions) = match self {
            ReferenceModel::Sentiment => {
                let out = sentiment_predict(&need(&inputs.text, "text")?, &Lexicon::default());
                (Some(out.probs), None, out.attributions)
            }
            ReferenceModel::Hate => {
                let out = hate_predict(&need(&inputs.text, "text")?, &HATE_KEYWORDS);
                (Some(out.probs), None, out.attributions)
            }
            ReferenceModel::Nli => {
                let out = nli_predict(
                    &need(&inputs.context, "context")?,
                    &need(&inputs.hypothesis, "hypothesis")?,
                );
                (Some(out.probs), None, out.attributions)
            }
            ReferenceModel::NliHypothesisOnly => {
                let out = nli_hypothesis_only_predict(&need(&inputs.hypothesis, "hypothesis")?);
                (Some(out.probs), None, out.attributions)
            }
            ReferenceModel::Qa => {
                let (answer, attr) = qa_predict(
                    &need(&inputs.context, "context")?,
                    &need(&inputs.question, "question")?,
                );
                (None, Some(answer), attr)
            }
        };
        Ok(PredictResponse {
            label_probs,
            answer,
            attributions: request.options.attributions.then(|| {
                attributions
                    .into_iter()
                    .map(|(token, score)| WireAttribution { token, score })
                    .collect()
            }),
        })
    }
}

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
    })
}

fn model_routes(model: ReferenceModel) -> Router {
    Router::new().route("/health", get(health)).route(
        "/v1/predict",
        post(move |Json(req): Json<PredictRequest>| async move {
            match model.respond(&req) {
                Ok(resp) => Ok(Json(resp)),
                Err(message) => Err((
                    StatusCode::BAD_REQUEST,
                    Json(json!({"code": "invalid-input", "message": message, "detail": null})),
                )),
            }
        }),
    )
}

/// All reference models, mounted under `/models/{path}`.
pub fn router() -> Router {
    ReferenceModel::ALL.into_iter().fold(Router::new(), |r, m| {
        r.nest(&format!("/models/{}", m.path()), model_routes(m))
    })
}

/// Serves the reference models on an ephemeral localhost port.
pub async fn spawn_local() -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router()).await;
    });
    Ok((addr, handle))
}
