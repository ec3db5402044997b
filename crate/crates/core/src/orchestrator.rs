//! The live collection loop: rounds, context sampling, submissions,
//! perturbations, validation votes and model evaluation.
//!
//! A submission holds its round's gate for reading from the first status
//! check until the example is stored; closing a round takes the gate for
//! writing. A submission therefore either lands in an open round or fails
//! with `closed-round`, never half-way.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use futures::future::join_all;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

use crate::anonymize::Pseudonymizer;
use crate::error::{Error, GatewayError, Result};
use crate::fooling::{judge_classification, judge_span};
use crate::gateway::{EndpointDescriptor, Gateway, PredictRequest};
use crate::metrics::{aggregate_score, round_accuracy, user_leaderboard, Gold, LeaderboardEntry, RoundScore};
use crate::model::{
    Condition, Context, ContextId, ContextPool, Example, ExampleId, ExampleInputs, Explanations,
    FoolingVerdict, LifecycleEvent, LifecycleState, ModelPrediction, PoolId, Provenance, Round,
    RoundId, RoundStatus, Task, TaskConfig, TaskId, TaskKind, TaskType, TicketId,
};
use crate::storage::Store;
use crate::validation::{self, Judgment, Resolution, ValidationTicket, Vote};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// What an annotator is handed before writing an example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextAssignment {
    pub context: Context,
    /// NLI only: the label the annotator should try to elicit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAssignment {
    pub condition: Condition,
    /// The review sentence to start from, in the prompt condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Context>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub inputs: ExampleInputs,
    #[serde(default)]
    pub context_id: Option<ContextId>,
    #[serde(default)]
    pub explanations: Option<Explanations>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionOutcome {
    pub example_id: ExampleId,
    pub verdict: FoolingVerdict,
    pub predictions: Vec<ModelPrediction>,
    pub next_state: LifecycleState,
    pub feedback_message: String,
}

const FOOLED_FEEDBACK: &str = "You fooled the model. Tell us why your example is correct, \
     and why you think the model got it wrong.";
const NOT_FOOLED_FEEDBACK: &str = "The model got this one right. Tell us why your example is \
     correct, and what might have made the model get it wrong.";

/// A ticket as a validator sees it. Carries no author identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketView {
    pub ticket_id: TicketId,
    pub example_id: ExampleId,
    pub task_name: String,
    pub context_text: Option<String>,
    pub inputs: ExampleInputs,
    pub required_quorum: u32,
    pub votes_so_far: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub ticket_id: TicketId,
    pub resolution: Resolution,
    pub votes: usize,
    pub example_state: LifecycleState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub endpoint_id: String,
    pub gamma: f64,
    pub per_round: Vec<RoundScore>,
    pub aggregate: f64,
}

/// States whose examples carry a trusted gold answer for evaluation.
fn usable_for_evaluation(state: LifecycleState) -> bool {
    matches!(
        state,
        LifecycleState::VerifiedFooling
            | LifecycleState::VerifiedNotFooling
            | LifecycleState::RetainedUnvalidated
    )
}

pub struct Orchestrator {
    store: Arc<Store>,
    gateway: Gateway,
    clock: Arc<dyn Clock>,
    pseudonyms: Pseudonymizer,
    round_gates: Mutex<HashMap<RoundId, Arc<RwLock<()>>>>,
    ticket_locks: Mutex<HashMap<TicketId, Arc<Mutex<()>>>>,
}

impl Orchestrator {
    pub fn new(store: Arc<Store>, gateway: Gateway) -> Self {
        Orchestrator {
            store,
            gateway,
            clock: Arc::new(SystemClock),
            pseudonyms: Pseudonymizer::random(),
            round_gates: Mutex::default(),
            ticket_locks: Mutex::default(),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Salt for public leaderboard handles.
    pub fn with_pseudonyms(mut self, pseudonyms: Pseudonymizer) -> Self {
        self.pseudonyms = pseudonyms;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn pseudonyms(&self) -> &Pseudonymizer {
        &self.pseudonyms
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn gate(&self, round_id: RoundId) -> Arc<RwLock<()>> {
        self.round_gates.lock().entry(round_id).or_default().clone()
    }

    pub fn create_task(&self, config: TaskConfig) -> Result<Task> {
        self.store.create_task(config)
    }

    pub fn create_context_pool<I, S, T>(&self, name: &str, contexts: I) -> Result<ContextPool>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        self.store.create_pool(name, contexts)
    }

    /// Opens the next round of a task against freshly probed endpoints.
    pub async fn open_round(
        &self,
        task_id: TaskId,
        endpoints: Vec<EndpointDescriptor>,
        pool_id: PoolId,
    ) -> Result<Round> {
        let task = self.store.task(task_id)?;
        self.store.pool(pool_id)?;
        if endpoints.is_empty() {
            return Err(Error::InvalidInput("a round needs at least one target endpoint".into()));
        }
        let mut ids = BTreeSet::new();
        for e in &endpoints {
            if e.task_type != task.task_type {
                return Err(Error::InvalidInput(format!(
                    "endpoint {} serves {:?}, task is {:?}",
                    e.endpoint_id, e.task_type, task.task_type
                )));
            }
            if e.timeout_ms == 0 {
                return Err(Error::InvalidInput(format!("endpoint {} has a zero timeout", e.endpoint_id)));
            }
            if !ids.insert(e.endpoint_id.as_str()) {
                return Err(Error::InvalidInput(format!("endpoint {} listed twice", e.endpoint_id)));
            }
        }
        if self.store.rounds_for_task(task_id).iter().any(Round::is_open) {
            return Err(Error::PreviousRoundOpen);
        }
        let probes = join_all(endpoints.iter().map(|e| self.gateway.health(e))).await;
        for (probe, e) in probes.into_iter().zip(&endpoints) {
            if let Err(err) = probe {
                tracing::warn!(endpoint = %e.endpoint_id, %err, "health probe failed");
                return Err(Error::EndpointUnhealthy(e.endpoint_id.clone()));
            }
        }
        let now = self.now();
        let round = self.store.insert_round(task_id, |round_id, existing| {
            if existing.iter().any(|r| r.is_open()) {
                return Err(Error::PreviousRoundOpen);
            }
            Ok(Round {
                round_id,
                task_id,
                index: existing.last().map_or(1, |r| r.index + 1),
                target_endpoints: endpoints,
                context_pool_id: pool_id,
                status: RoundStatus::Open,
                opened_at: now,
                closed_at: None,
            })
        })?;
        tracing::info!(task = %task.name, round = round.index, "round opened");
        Ok(round)
    }

    /// Closes a round once in-flight submissions have landed. Open validation
    /// tickets stay resolvable.
    pub async fn close_round(&self, round_id: RoundId) -> Result<Round> {
        let gate = self.gate(round_id);
        let _guard = gate.write().await;
        let now = self.now();
        self.store.update_round(round_id, |round| {
            if !round.is_open() {
                return Err(Error::AlreadyClosed);
            }
            let mut next = round.clone();
            next.status = RoundStatus::Closed;
            next.closed_at = Some(now);
            Ok(next)
        })
        .inspect(|r| tracing::info!(round_id = %r.round_id, index = r.index, "round closed"))
    }

    pub fn current_round(&self, task_id: TaskId) -> Option<Round> {
        self.store.rounds_for_task(task_id).into_iter().find(Round::is_open)
    }

    /// Least-used context first (ties by id). NLI tasks also get the label
    /// this context has been served least, ties by label order.
    pub fn sample_context(&self, round_id: RoundId) -> Result<ContextAssignment> {
        let round = self.store.round(round_id)?;
        if !round.is_open() {
            return Err(Error::ClosedRound);
        }
        let task = self.store.task(round.task_id)?;
        let wants_label = task.kind == TaskKind::Nli;
        let (context, target_label) = self.store.take_context(round.context_pool_id, |candidates| {
            let (idx, ctx) = candidates
                .iter()
                .enumerate()
                .min_by_key(|(_, c)| (c.usage_count, c.context_id))?;
            let label = wants_label.then(|| {
                task.label_set
                    .iter()
                    .min_by_key(|l| ctx.served_labels.get(*l).copied().unwrap_or(0))
                    .cloned()
                    .expect("classification tasks have labels")
            });
            Some((idx, label))
        })?;
        Ok(ContextAssignment {
            context,
            target_label,
        })
    }

    /// Alternates prompt / no-prompt per annotator, starting with prompt.
    pub fn assign_condition(&self, round_id: RoundId, annotator_id: &str) -> Result<ConditionAssignment> {
        let round = self.store.round(round_id)?;
        let task = self.store.task(round.task_id)?;
        if !task.condition_assignment_enabled {
            return Err(Error::ConditionsDisabled);
        }
        if !round.is_open() {
            return Err(Error::ClosedRound);
        }
        if self.store.pool(round.context_pool_id)?.context_ids.is_empty() {
            return Err(Error::EmptyPool);
        }
        let before = self.store.next_assignment(task.task_id, annotator_id)?;
        if before % 2 == 0 {
            let assignment = self.sample_context(round_id)?;
            Ok(ConditionAssignment {
                condition: Condition::Prompt,
                context: Some(assignment.context),
            })
        } else {
            Ok(ConditionAssignment {
                condition: Condition::NoPrompt,
                context: None,
            })
        }
    }

    fn check_inputs(&self, task: &Task, inputs: &ExampleInputs) -> Result<()> {
        if inputs.kind() != task.kind {
            return Err(Error::InvalidInput(format!(
                "{:?} inputs submitted to a {:?} task",
                inputs.kind(),
                task.kind
            )));
        }
        if inputs.authored_text().trim().is_empty() {
            return Err(Error::InvalidInput("example text is empty".into()));
        }
        if let Some(label) = inputs.claimed_label() {
            if !task.has_label(label) {
                return Err(Error::UnknownLabel(label.to_owned()));
            }
        }
        Ok(())
    }

    /// Judges a new example against the round's endpoints and stores it.
    pub async fn submit_example(
        &self,
        round_id: RoundId,
        annotator_id: &str,
        submission: Submission,
    ) -> Result<SubmissionOutcome> {
        let gate = self.gate(round_id);
        let _guard = gate.read().await;
        let round = self.store.round(round_id)?;
        if !round.is_open() {
            return Err(Error::ClosedRound);
        }
        let task = self.store.task(round.task_id)?;
        if !task.admits(annotator_id) {
            return Err(Error::NotInPool);
        }
        self.check_inputs(&task, &submission.inputs)?;
        let context = match submission.context_id {
            Some(id) => {
                let pool = self.store.pool(round.context_pool_id)?;
                if !pool.context_ids.contains(&id) {
                    return Err(Error::InvalidInput(format!("context {id} is not in this round's pool")));
                }
                Some(self.store.context(id)?)
            }
            None if task.kind.needs_context() => {
                return Err(Error::InvalidInput(format!("{:?} examples need a context", task.kind)))
            }
            None => None,
        };
        if let ExampleInputs::Qa { answer, .. } = &submission.inputs {
            answer.validate(&context.as_ref().expect("qa has a context").text)?;
        }
        self.judge_and_store(
            &round,
            &task,
            annotator_id,
            submission.inputs,
            context.as_ref(),
            submission.explanations.unwrap_or_default(),
            None,
        )
        .await
    }

    /// Submits a minimally edited copy of `parent_id` whose label is flipped.
    /// Lands in the task's currently open round.
    pub async fn create_perturbation(
        &self,
        parent_id: ExampleId,
        new_text: String,
        flipped_label: String,
        annotator_id: &str,
    ) -> Result<SubmissionOutcome> {
        let parent = self
            .store
            .get_example(parent_id)
            .map_err(|_| Error::ParentNotFound(parent_id.0))?
            .value;
        let parent_label = parent
            .claimed_label()
            .ok_or_else(|| Error::InvalidInput("only labelled examples can be perturbed".into()))?;
        if parent_label == flipped_label {
            return Err(Error::SameLabel);
        }
        let task = self.store.task(parent.task_id)?;
        let round = self.current_round(task.task_id).ok_or(Error::ClosedRound)?;
        let gate = self.gate(round.round_id);
        let _guard = gate.read().await;
        let round = self.store.round(round.round_id)?;
        if !round.is_open() {
            return Err(Error::ClosedRound);
        }
        if !task.admits(annotator_id) {
            return Err(Error::NotInPool);
        }
        let distance = strsim::levenshtein(parent.inputs.authored_text(), &new_text);
        let inputs = parent
            .inputs
            .with_text_and_label(new_text, flipped_label)
            .ok_or_else(|| Error::InvalidInput("only labelled examples can be perturbed".into()))?;
        self.check_inputs(&task, &inputs)?;
        let context = parent.context_id.map(|id| self.store.context(id)).transpose()?;
        self.judge_and_store(
            &round,
            &task,
            annotator_id,
            inputs,
            context.as_ref(),
            Explanations::default(),
            Some((parent_id, distance)),
        )
        .await
    }

    fn judge(
        task: &Task,
        inputs: &ExampleInputs,
        predictions: &[ModelPrediction],
    ) -> Result<FoolingVerdict> {
        let mut per_endpoint = Vec::with_capacity(predictions.len());
        match (task.task_type, inputs) {
            (TaskType::SpanExtraction, ExampleInputs::Qa { answer, .. }) => {
                let threshold = task.span_f1_threshold.ok_or(Error::MissingThreshold)?;
                let mut f1s = Vec::with_capacity(predictions.len());
                for p in predictions {
                    let predicted = p.answer().ok_or_else(|| malformed(p, "missing answer"))?;
                    let j = judge_span(&answer.text, &predicted.text, threshold);
                    per_endpoint.push(j.fooled);
                    f1s.push(j.f1);
                }
                FoolingVerdict::new(per_endpoint, task.fooling_policy, Some(f1s))
            }
            (TaskType::Classification, _) => {
                let claimed = inputs.claimed_label().expect("classification inputs carry a label");
                for p in predictions {
                    let probs = p.label_probs().ok_or_else(|| malformed(p, "missing label_probs"))?;
                    if probs.len() != task.label_set.len() || !task.label_set.iter().all(|l| probs.contains_key(l)) {
                        return Err(malformed(p, "labels differ from the task's label set"));
                    }
                    per_endpoint.push(judge_classification(&task.label_set, claimed, probs)?);
                }
                FoolingVerdict::new(per_endpoint, task.fooling_policy, None)
            }
            _ => Err(Error::InvalidInput("inputs do not match the task type".into())),
        }
    }

    #[allow(clippy::too_many_arguments)]
    async fn judge_and_store(
        &self,
        round: &Round,
        task: &Task,
        annotator_id: &str,
        inputs: ExampleInputs,
        context: Option<&Context>,
        explanations: Explanations,
        parent: Option<(ExampleId, usize)>,
    ) -> Result<SubmissionOutcome> {
        let request = PredictRequest::for_example(&inputs, context.map(|c| c.text.as_str()), true);
        let predictions = self
            .gateway
            .predict_ensemble(&round.target_endpoints, &request)
            .await?;
        let verdict = Self::judge(task, &inputs, &predictions)?;
        let event = if verdict.combined {
            LifecycleEvent::JudgedFooling
        } else {
            LifecycleEvent::JudgedNotFooling
        };
        let now = self.now();
        let created = Example {
            example_id: self.store.allocate_example_id()?,
            round_id: round.round_id,
            task_id: task.task_id,
            annotator_id: annotator_id.to_owned(),
            context_id: context.map(|c| c.context_id),
            inputs,
            predictions,
            verdict,
            state: LifecycleState::Created,
            explanations,
            parent_example_id: parent.map(|p| p.0),
            parent_edit_distance: parent.map(|p| p.1),
            provenance: Provenance::Native,
            created_at: now,
            resolved_at: None,
        };
        let example = created.advance(event, task.validate_non_fooling, now)?;
        example.check_against_round(round)?;
        self.store.put_example(example.clone(), None)?;
        if example.state == LifecycleState::PendingValidation {
            self.store
                .insert_ticket(|id| validation::enqueue(id, &example, task.validation_policy))?;
        }
        Ok(SubmissionOutcome {
            example_id: example.example_id,
            feedback_message: if example.verdict.combined {
                FOOLED_FEEDBACK
            } else {
                NOT_FOOLED_FEEDBACK
            }
            .to_owned(),
            verdict: example.verdict,
            predictions: example.predictions,
            next_state: example.state,
        })
    }

    /// Attaches the author's explanations to an example.
    pub fn add_explanations(
        &self,
        example_id: ExampleId,
        annotator_id: &str,
        explanations: Explanations,
    ) -> Result<Example> {
        let current = self.store.get_example(example_id)?;
        if current.value.annotator_id != annotator_id {
            return Err(Error::NotAuthor);
        }
        let mut next = current.value;
        next.explanations = explanations;
        self.store.put_example(next.clone(), Some(current.version))?;
        Ok(next)
    }

    /// Next ticket this validator may vote on, least-voted first.
    pub fn next_ticket(&self, validator_id: &str) -> Result<Option<TicketView>> {
        let tickets = self.store.open_tickets();
        let Some(ticket) = validation::select_next(&tickets, validator_id) else {
            return Ok(None);
        };
        let example = self.store.get_example(ticket.example_id)?.value;
        let task = self.store.task(example.task_id)?;
        let context_text = example.context_id.map(|id| self.store.context(id)).transpose()?.map(|c| c.text);
        Ok(Some(TicketView {
            ticket_id: ticket.ticket_id,
            example_id: ticket.example_id,
            task_name: task.name,
            context_text,
            inputs: example.inputs,
            required_quorum: ticket.required_quorum,
            votes_so_far: ticket.votes.len(),
        }))
    }

    pub fn ticket(&self, ticket_id: TicketId) -> Result<ValidationTicket> {
        Ok(self.store.get_ticket(ticket_id)?.value)
    }

    /// Records a vote; a resolved ticket moves its example to a terminal state.
    pub fn vote(
        &self,
        ticket_id: TicketId,
        validator_id: &str,
        judgment: Judgment,
        note: Option<String>,
    ) -> Result<VoteOutcome> {
        let lock = self.ticket_locks.lock().entry(ticket_id).or_default().clone();
        let _serialized = lock.lock();

        let current = self.store.get_ticket(ticket_id)?;
        let now = self.now();
        let ticket = validation::record_vote(&current.value, validator_id, judgment, note, now)?;
        // Apply the lifecycle change before committing the vote, so a failure
        // leaves both untouched.
        let mut example_state = self.store.get_example(ticket.example_id)?.value.state;
        if let Some(event) = ticket.resolution.event() {
            example_state = self.apply_event(ticket.example_id, event, now)?;
        }
        self.store.put_ticket(ticket.clone(), current.version)?;
        Ok(VoteOutcome {
            ticket_id,
            resolution: ticket.resolution,
            votes: ticket.votes.len(),
            example_state,
        })
    }

    fn apply_event(&self, example_id: ExampleId, event: LifecycleEvent, at: DateTime<Utc>) -> Result<LifecycleState> {
        // Explanation edits may race with us; retry on version conflicts.
        let mut attempts = 0;
        loop {
            let current = self.store.get_example(example_id)?;
            let task = self.store.task(current.value.task_id)?;
            let next = current.value.advance(event, task.validate_non_fooling, at)?;
            match self.store.put_example(next.clone(), Some(current.version)) {
                Ok(_) => return Ok(next.state),
                Err(Error::VersionConflict { .. }) if attempts < 8 => attempts += 1,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn votes(&self, ticket_id: TicketId) -> Result<Vec<Vote>> {
        Ok(self.store.get_ticket(ticket_id)?.value.votes)
    }

    pub fn user_leaderboard(&self, task_id: TaskId) -> Result<Vec<LeaderboardEntry>> {
        self.store.task(task_id)?;
        Ok(user_leaderboard(&self.store.list_by_task(task_id), &self.pseudonyms))
    }

    /// Scores an endpoint on every round of a task that has gold-labelled
    /// examples, then folds the rounds with a recency discount.
    pub async fn evaluate(&self, task_id: TaskId, endpoint: &EndpointDescriptor, gamma: f64) -> Result<Evaluation> {
        let task = self.store.task(task_id)?;
        if endpoint.task_type != task.task_type {
            return Err(Error::InvalidInput(format!(
                "endpoint serves {:?}, task is {:?}",
                endpoint.task_type, task.task_type
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::GammaOutOfRange(gamma));
        }
        let mut per_round = Vec::new();
        for round in self.store.rounds_for_task(task_id) {
            let examples: Vec<Example> = self
                .store
                .list_by_round(round.round_id)
                .into_iter()
                .filter(|e| usable_for_evaluation(e.state))
                .collect();
            if examples.is_empty() {
                continue;
            }
            let mut requests = Vec::with_capacity(examples.len());
            let mut golds = Vec::with_capacity(examples.len());
            for e in &examples {
                let context = e.context_id.map(|id| self.store.context(id)).transpose()?;
                requests.push(PredictRequest::for_example(&e.inputs, context.as_ref().map(|c| c.text.as_str()), false));
                golds.push(match &e.inputs {
                    ExampleInputs::Qa { answer, .. } => Gold::Span(answer.text.clone()),
                    other => Gold::Label(other.claimed_label().expect("labelled").to_owned()),
                });
            }
            let predictions: Vec<ModelPrediction> = join_all(requests.iter().map(|r| self.gateway.predict(endpoint, r)))
                .await
                .into_iter()
                .collect::<std::result::Result<_, GatewayError>>()?;
            per_round.push(round_accuracy(round.index, &predictions, &golds, task.task_type, &task.label_set)?);
        }
        let aggregate = aggregate_score(&per_round, gamma)?;
        Ok(Evaluation {
            endpoint_id: endpoint.endpoint_id.clone(),
            gamma,
            per_round,
            aggregate,
        })
    }
}

fn malformed(p: &ModelPrediction, message: &str) -> Error {
    Error::Gateway(GatewayError::MemberFailure {
        endpoint_id: p.endpoint_id.clone(),
        source: Box::new(GatewayError::MalformedResponse {
            endpoint_id: p.endpoint_id.clone(),
            message: message.to_owned(),
        }),
    })
}
