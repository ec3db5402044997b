//! Domain records shared by every other module, and the example lifecycle.
//!
//! Records are plain values. Mutation happens by building a new version and
//! writing it back through [`crate::storage::Store`], which enforces the
//! single-writer contract.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fooling::combine_ensemble;
use crate::gateway::{DisplayAttribution, EndpointDescriptor};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(TaskId);
id_type!(RoundId);
id_type!(ContextId);
id_type!(PoolId);
id_type!(ExampleId);
id_type!(TicketId);

pub const DEFAULT_SPAN_F1_THRESHOLD: f64 = 0.4;
pub const DEFAULT_QUORUM: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Classification,
    SpanExtraction,
}

/// Which input record a task collects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Nli,
    Qa,
    Sentiment,
    Hate,
}

impl TaskKind {
    pub fn task_type(self) -> TaskType {
        match self {
            TaskKind::Qa => TaskType::SpanExtraction,
            _ => TaskType::Classification,
        }
    }

    pub fn needs_context(self) -> bool {
        matches!(self, TaskKind::Nli | TaskKind::Qa)
    }
}

/// How per-endpoint fooled verdicts combine into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsemblePolicy {
    #[default]
    All,
    Majority,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementRule {
    #[default]
    Majority,
    Unanimous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationPolicy {
    pub quorum: u32,
    pub rule: AgreementRule,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy {
            quorum: DEFAULT_QUORUM,
            rule: AgreementRule::Majority,
        }
    }
}

/// What a task owner submits to create a task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub label_set: Option<Vec<String>>,
    #[serde(default)]
    pub fooling_policy: EnsemblePolicy,
    #[serde(default)]
    pub span_f1_threshold: Option<f64>,
    #[serde(default)]
    pub validate_non_fooling: bool,
    #[serde(default)]
    pub validation_policy: ValidationPolicy,
    /// Defaults to on for sentiment tasks.
    #[serde(default)]
    pub condition_assignment_enabled: Option<bool>,
    /// Annotators allowed to submit. Empty means anyone with an annotator session.
    #[serde(default)]
    pub annotator_pool: Vec<String>,
}

impl TaskConfig {
    pub fn new(name: impl Into<String>, kind: TaskKind) -> Self {
        TaskConfig {
            name: name.into(),
            kind,
            label_set: None,
            fooling_policy: EnsemblePolicy::All,
            span_f1_threshold: None,
            validate_non_fooling: false,
            validation_policy: ValidationPolicy::default(),
            condition_assignment_enabled: None,
            annotator_pool: Vec::new(),
        }
    }

    pub fn labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.label_set = Some(labels.into_iter().map(Into::into).collect());
        self
    }

    pub fn threshold(mut self, threshold: f64) -> Self {
        self.span_f1_threshold = Some(threshold);
        self
    }

    pub fn policy(mut self, policy: EnsemblePolicy) -> Self {
        self.fooling_policy = policy;
        self
    }

    pub fn quorum(mut self, quorum: u32, rule: AgreementRule) -> Self {
        self.validation_policy = ValidationPolicy { quorum, rule };
        self
    }

    pub fn validate_non_fooling(mut self, on: bool) -> Self {
        self.validate_non_fooling = on;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: TaskId,
    pub name: String,
    pub kind: TaskKind,
    pub task_type: TaskType,
    pub label_set: Vec<String>,
    pub fooling_policy: EnsemblePolicy,
    pub span_f1_threshold: Option<f64>,
    pub validate_non_fooling: bool,
    pub validation_policy: ValidationPolicy,
    pub condition_assignment_enabled: bool,
    pub annotator_pool: Vec<String>,
}

impl Task {
    /// Checks the configuration and builds the task record. Name uniqueness is
    /// the store's concern.
    pub fn from_config(task_id: TaskId, config: TaskConfig) -> Result<Task> {
        if config.name.trim().is_empty() {
            return Err(Error::InvalidConfig("task name is empty".into()));
        }
        let task_type = config.kind.task_type();
        let label_set = match task_type {
            TaskType::Classification => {
                let labels = config.label_set.unwrap_or_default();
                if labels.len() < 2 {
                    return Err(Error::InvalidLabelSet(format!(
                        "classification needs at least 2 labels, got {}",
                        labels.len()
                    )));
                }
                let mut seen = HashSet::new();
                for label in &labels {
                    if label.is_empty() {
                        return Err(Error::InvalidLabelSet("empty label name".into()));
                    }
                    if !seen.insert(label.as_str()) {
                        return Err(Error::InvalidLabelSet(format!("duplicate label {label:?}")));
                    }
                }
                labels
            }
            TaskType::SpanExtraction => {
                if config.label_set.as_ref().is_some_and(|l| !l.is_empty()) {
                    return Err(Error::InvalidLabelSet(
                        "span extraction tasks take no label set".into(),
                    ));
                }
                Vec::new()
            }
        };
        let span_f1_threshold = match (task_type, config.span_f1_threshold) {
            (TaskType::SpanExtraction, None) => return Err(Error::MissingThreshold),
            (_, Some(t)) if !(0.0..=1.0).contains(&t) => {
                return Err(Error::InvalidConfig(format!(
                    "span F1 threshold {t} is outside [0, 1]"
                )))
            }
            (TaskType::SpanExtraction, t) => t,
            (TaskType::Classification, _) => None,
        };
        if config.validation_policy.quorum == 0 {
            return Err(Error::InvalidConfig("quorum must be at least 1".into()));
        }
        Ok(Task {
            task_id,
            name: config.name,
            kind: config.kind,
            task_type,
            label_set,
            fooling_policy: config.fooling_policy,
            span_f1_threshold,
            validate_non_fooling: config.validate_non_fooling,
            validation_policy: config.validation_policy,
            condition_assignment_enabled: config
                .condition_assignment_enabled
                .unwrap_or(config.kind == TaskKind::Sentiment),
            annotator_pool: config.annotator_pool,
        })
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.label_set.iter().any(|l| l == label)
    }

    pub fn admits(&self, annotator_id: &str) -> bool {
        self.annotator_pool.is_empty() || self.annotator_pool.iter().any(|a| a == annotator_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub round_id: RoundId,
    pub task_id: TaskId,
    /// 1-based, consecutive within a task.
    pub index: u32,
    pub target_endpoints: Vec<EndpointDescriptor>,
    pub context_pool_id: PoolId,
    pub status: RoundStatus,
    pub opened_at: DateTime<Utc>,
    pub closed_at: Option<DateTime<Utc>>,
}

impl Round {
    pub fn is_open(&self) -> bool {
        self.status == RoundStatus::Open
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub context_id: ContextId,
    pub text: String,
    pub source_tag: String,
    pub usage_count: u64,
    /// How often each target label has been handed out with this context.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub served_labels: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPool {
    pub pool_id: PoolId,
    pub name: String,
    pub context_ids: Vec<ContextId>,
}

/// Sentiment elicitation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "prompt")]
    Prompt,
    #[serde(rename = "no_prompt")]
    NoPrompt,
    #[default]
    #[serde(rename = "n/a")]
    NotApplicable,
}

/// Gold answer span. Offsets count Unicode scalar values, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

impl AnswerSpan {
    pub fn validate(&self, context: &str) -> Result<()> {
        if self.char_start >= self.char_end {
            return Err(Error::InvalidSpan(format!(
                "start {} must be before end {}",
                self.char_start, self.char_end
            )));
        }
        match char_slice(context, self.char_start, self.char_end) {
            None => Err(Error::InvalidSpan(format!(
                "[{}, {}) exceeds context length {}",
                self.char_start,
                self.char_end,
                context.chars().count()
            ))),
            Some(slice) if slice != self.text => Err(Error::InvalidSpan(format!(
                "context slice {slice:?} does not equal span text {:?}",
                self.text
            ))),
            Some(_) => Ok(()),
        }
    }
}

/// Slices `text` by char offsets `[start, end)`.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut offsets = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()));
    let begin = offsets.nth(start)?;
    let finish = if end == start {
        begin
    } else {
        offsets.nth(end - start - 1)?
    };
    Some(&text[begin..finish])
}

/// Task-specific inputs an annotator submits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExampleInputs {
    Nli {
        hypothesis: String,
        /// The label the annotator was asked to elicit; it is also their claimed gold label.
        target_label: String,
    },
    Qa {
        question: String,
        answer: AnswerSpan,
    },
    Sentiment {
        text: String,
        label: String,
        #[serde(default)]
        condition: Condition,
    },
    Hate {
        text: String,
        label: String,
        #[serde(default)]
        target_group: Option<String>,
        #[serde(default)]
        statement_type: Option<String>,
    },
}

impl ExampleInputs {
    pub fn kind(&self) -> TaskKind {
        match self {
            ExampleInputs::Nli { .. } => TaskKind::Nli,
            ExampleInputs::Qa { .. } => TaskKind::Qa,
            ExampleInputs::Sentiment { .. } => TaskKind::Sentiment,
            ExampleInputs::Hate { .. } => TaskKind::Hate,
        }
    }

    pub fn claimed_label(&self) -> Option<&str> {
        match self {
            ExampleInputs::Nli { target_label, .. } => Some(target_label),
            ExampleInputs::Sentiment { label, .. } | ExampleInputs::Hate { label, .. } => {
                Some(label)
            }
            ExampleInputs::Qa { .. } => None,
        }
    }

    /// The free text the annotator wrote.
    pub fn authored_text(&self) -> &str {
        match self {
            ExampleInputs::Nli { hypothesis, .. } => hypothesis,
            ExampleInputs::Qa { question, .. } => question,
            ExampleInputs::Sentiment { text, .. } | ExampleInputs::Hate { text, .. } => text,
        }
    }

    /// Copy with the authored text and claimed label replaced.
    pub fn with_text_and_label(&self, text: String, label: String) -> Option<ExampleInputs> {
        Some(match self {
            ExampleInputs::Nli { .. } => ExampleInputs::Nli {
                hypothesis: text,
                target_label: label,
            },
            ExampleInputs::Sentiment { condition, .. } => ExampleInputs::Sentiment {
                text,
                label,
                condition: *condition,
            },
            ExampleInputs::Hate {
                target_group,
                statement_type,
                ..
            } => ExampleInputs::Hate {
                text,
                label,
                target_group: target_group.clone(),
                statement_type: statement_type.clone(),
            },
            ExampleInputs::Qa { .. } => return None,
        })
    }
}

/// Model output for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionPayload {
    LabelProbs(BTreeMap<String, f64>),
    Answer(PredictedAnswer),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedAnswer {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrediction {
    pub endpoint_id: String,
    #[serde(flatten)]
    pub payload: PredictionPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributions: Option<Vec<DisplayAttribution>>,
    pub latency_ms: u64,
}

impl ModelPrediction {
    pub fn label_probs(&self) -> Option<&BTreeMap<String, f64>> {
        match &self.payload {
            PredictionPayload::LabelProbs(p) => Some(p),
            PredictionPayload::Answer(_) => None,
        }
    }

    pub fn answer(&self) -> Option<&PredictedAnswer> {
        match &self.payload {
            PredictionPayload::Answer(a) => Some(a),
            PredictionPayload::LabelProbs(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoolingVerdict {
    pub per_endpoint: Vec<bool>,
    pub combined: bool,
    pub policy_used: EnsemblePolicy,
    /// Per-endpoint token F1, span tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<Vec<f64>>,
}

impl FoolingVerdict {
    pub fn new(per_endpoint: Vec<bool>, policy: EnsemblePolicy, f1: Option<Vec<f64>>) -> Result<Self> {
        let combined = combine_ensemble(&per_endpoint, policy)?;
        Ok(FoolingVerdict {
            per_endpoint,
            combined,
            policy_used: policy,
            f1,
        })
    }

    pub fn is_consistent(&self) -> bool {
        combine_ensemble(&self.per_endpoint, self.policy_used).ok() == Some(self.combined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleState {
    Created,
    PendingValidation,
    VerifiedFooling,
    VerifiedNotFooling,
    Rejected,
    RetainedUnvalidated,
}

impl LifecycleState {
    pub const ALL: [LifecycleState; 6] = [
        LifecycleState::Created,
        LifecycleState::PendingValidation,
        LifecycleState::VerifiedFooling,
        LifecycleState::VerifiedNotFooling,
        LifecycleState::Rejected,
        LifecycleState::RetainedUnvalidated,
    ];

    pub fn is_terminal(self) -> bool {
        !matches!(self, LifecycleState::Created | LifecycleState::PendingValidation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    JudgedFooling,
    JudgedNotFooling,
    ValidationResolvedAgree,
    ValidationResolvedDisagree,
    Flagged,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 5] = [
        LifecycleEvent::JudgedFooling,
        LifecycleEvent::JudgedNotFooling,
        LifecycleEvent::ValidationResolvedAgree,
        LifecycleEvent::ValidationResolvedDisagree,
        LifecycleEvent::Flagged,
    ];
}

/// Task and verdict facts some transitions branch on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionContext {
    pub validate_non_fooling: bool,
    pub fooled: bool,
}

/// The example lifecycle table. Terminal states accept no events.
pub fn transition(
    state: LifecycleState,
    event: LifecycleEvent,
    ctx: TransitionContext,
) -> Result<LifecycleState> {
    use LifecycleEvent as E;
    use LifecycleState as S;
    let next = match (state, event) {
        (S::Created, E::JudgedFooling) => S::PendingValidation,
        (S::Created, E::JudgedNotFooling) if ctx.validate_non_fooling => S::PendingValidation,
        (S::Created, E::JudgedNotFooling) => S::RetainedUnvalidated,
        (S::PendingValidation, E::ValidationResolvedAgree) if ctx.fooled => S::VerifiedFooling,
        (S::PendingValidation, E::ValidationResolvedAgree) => S::VerifiedNotFooling,
        (S::PendingValidation, E::ValidationResolvedDisagree) => S::Rejected,
        (S::Created | S::PendingValidation, E::Flagged) => S::Rejected,
        (from, event) => return Err(Error::IllegalTransition { from, event }),
    };
    Ok(next)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanations {
    #[serde(default)]
    pub why_correct: String,
    #[serde(default)]
    pub why_model_wrong_or_right: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Native,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: ExampleId,
    pub round_id: RoundId,
    pub task_id: TaskId,
    /// Raw annotator id, or the export pseudonym for imported examples.
    pub annotator_id: String,
    pub context_id: Option<ContextId>,
    pub inputs: ExampleInputs,
    pub predictions: Vec<ModelPrediction>,
    pub verdict: FoolingVerdict,
    pub state: LifecycleState,
    pub explanations: Explanations,
    pub parent_example_id: Option<ExampleId>,
    /// Character edit distance to the parent's authored text.
    pub parent_edit_distance: Option<usize>,
    pub provenance: Provenance,
    pub created_at: DateTime<Utc>,
    /// When the example reached its current terminal state.
    pub resolved_at: Option<DateTime<Utc>>,
}

impl Example {
    /// Predictions must line up one-to-one with the round's endpoints.
    pub fn check_against_round(&self, round: &Round) -> Result<()> {
        if self.predictions.len() != round.target_endpoints.len()
            || self.verdict.per_endpoint.len() != round.target_endpoints.len()
        {
            return Err(Error::InvalidInput(format!(
                "example has {} predictions for a round with {} endpoints",
                self.predictions.len(),
                round.target_endpoints.len()
            )));
        }
        for (pred, endpoint) in self.predictions.iter().zip(&round.target_endpoints) {
            if pred.endpoint_id != endpoint.endpoint_id {
                return Err(Error::InvalidInput(format!(
                    "prediction from {} where {} was expected",
                    pred.endpoint_id, endpoint.endpoint_id
                )));
            }
        }
        Ok(())
    }

    pub fn claimed_label(&self) -> Option<&str> {
        self.inputs.claimed_label()
    }

    /// Applies a lifecycle event, returning the next version of this example.
    pub fn advance(
        &self,
        event: LifecycleEvent,
        validate_non_fooling: bool,
        at: DateTime<Utc>,
    ) -> Result<Example> {
        let state = transition(
            self.state,
            event,
            TransitionContext {
                validate_non_fooling,
                fooled: self.verdict.combined,
            },
        )?;
        let mut next = self.clone();
        next.state = state;
        if state.is_terminal() {
            next.resolved_at = Some(at);
        }
        Ok(next)
    }
}
