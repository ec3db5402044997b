//! Line-delimited JSON export and import of one round.
//!
//! Public exports replace annotator ids with salted pseudonyms, truncate
//! timestamps to the date, leave out validator votes, and drop rejected
//! examples. Imported examples keep their pseudonyms, so re-exporting an
//! imported round with the same salt reproduces the file byte for byte.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::anonymize::Pseudonymizer;
use crate::error::{Error, Result};
use crate::gateway::EndpointDescriptor;
use crate::model::{
    AnswerSpan, Condition, Example, ExampleId, ExampleInputs, Explanations, FoolingVerdict,
    LifecycleState, ModelPrediction, Provenance, Round, RoundId, RoundStatus, TaskKind,
};
use crate::storage::Store;

/// One exported example. Field names and order are the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRecord {
    pub example_id: u64,
    pub round_index: u32,
    pub task_name: String,
    pub input_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<AnswerSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statement_type: Option<String>,
    pub predictions: Vec<ModelPrediction>,
    pub verdict: FoolingVerdict,
    pub state: LifecycleState,
    pub explanations: Explanations,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_pseudonym: Option<String>,
    /// Present only in raw (internal backup) exports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_example_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_edit_distance: Option<usize>,
    pub created_at: NaiveDate,
}

#[derive(Debug, Clone)]
pub enum ExportMode {
    /// Pseudonymized public release; rejected examples are left out.
    Anonymized(Pseudonymizer),
    /// Raw ids, every example. For internal backups only.
    Raw,
}

impl ExportMode {
    /// Anonymized export with a freshly drawn salt.
    pub fn public() -> Self {
        ExportMode::Anonymized(Pseudonymizer::random())
    }
}

fn to_record(
    example: &Example,
    round: &Round,
    task_name: &str,
    context_text: Option<String>,
    mode: &ExportMode,
) -> ExportRecord {
    let mut rec = ExportRecord {
        example_id: example.example_id.0,
        round_index: round.index,
        task_name: task_name.to_owned(),
        input_kind: example.inputs.kind(),
        context_text,
        hypothesis: None,
        question: None,
        text: None,
        claimed_label: example.claimed_label().map(str::to_owned),
        gold_answer: None,
        condition: None,
        target_group: None,
        statement_type: None,
        predictions: example.predictions.clone(),
        verdict: example.verdict.clone(),
        state: example.state,
        explanations: example.explanations.clone(),
        annotator_pseudonym: None,
        annotator_id: None,
        parent_example_id: example.parent_example_id.map(|p| p.0),
        parent_edit_distance: example.parent_edit_distance,
        created_at: example.created_at.date_naive(),
    };
    match &example.inputs {
        ExampleInputs::Nli { hypothesis, .. } => rec.hypothesis = Some(hypothesis.clone()),
        ExampleInputs::Qa { question, answer } => {
            rec.question = Some(question.clone());
            rec.gold_answer = Some(answer.clone());
        }
        ExampleInputs::Sentiment { text, condition, .. } => {
            rec.text = Some(text.clone());
            rec.condition = Some(*condition);
        }
        ExampleInputs::Hate {
            text,
            target_group,
            statement_type,
            ..
        } => {
            rec.text = Some(text.clone());
            rec.target_group = target_group.clone();
            rec.statement_type = statement_type.clone();
        }
    }
    match mode {
        ExportMode::Raw => rec.annotator_id = Some(example.annotator_id.clone()),
        ExportMode::Anonymized(p) => {
            rec.annotator_pseudonym = Some(match example.provenance {
                Provenance::Imported => example.annotator_id.clone(),
                Provenance::Native => p.pseudonym(&example.annotator_id),
            })
        }
    }
    rec
}

/// Builds the records of one round, sorted by example id.
pub fn export_records(store: &Store, round_id: RoundId, mode: &ExportMode) -> Result<Vec<ExportRecord>> {
    let round = store.round(round_id)?;
    let task = store.task(round.task_id)?;
    let mut records = Vec::new();
    for example in store.list_by_round(round_id) {
        if matches!(mode, ExportMode::Anonymized(_)) && example.state == LifecycleState::Rejected {
            continue;
        }
        let context_text = match example.context_id {
            Some(id) => Some(store.context(id)?.text),
            None => None,
        };
        records.push(to_record(&example, &round, &task.name, context_text, mode));
    }
    records.sort_by_key(|r| r.example_id);
    Ok(records)
}

/// Writes one JSON record per line.
pub fn export_round<W: Write>(store: &Store, round_id: RoundId, mode: &ExportMode, mut out: W) -> Result<usize> {
    let records = export_records(store, round_id, mode)?;
    for rec in &records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(records.len())
}

pub fn export_round_string(store: &Store, round_id: RoundId, mode: &ExportMode) -> Result<String> {
    let mut buf = Vec::new();
    export_round(store, round_id, mode, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[derive(Debug, Clone)]
pub struct ImportSummary {
    pub round: Round,
    pub example_ids: Vec<ExampleId>,
}

fn violation(line: usize, message: impl Into<String>) -> Error {
    Error::SchemaViolation {
        line,
        message: message.into(),
    }
}

fn inputs_of(line: usize, rec: &ExportRecord) -> Result<ExampleInputs> {
    let need = |v: &Option<String>, name: &str| {
        v.clone()
            .ok_or_else(|| violation(line, format!("{:?} record is missing {name}", rec.input_kind)))
    };
    Ok(match rec.input_kind {
        TaskKind::Nli => ExampleInputs::Nli {
            hypothesis: need(&rec.hypothesis, "hypothesis")?,
            target_label: need(&rec.claimed_label, "claimed_label")?,
        },
        TaskKind::Qa => ExampleInputs::Qa {
            question: need(&rec.question, "question")?,
            answer: rec
                .gold_answer
                .clone()
                .ok_or_else(|| violation(line, "qa record is missing gold_answer"))?,
        },
        TaskKind::Sentiment => ExampleInputs::Sentiment {
            text: need(&rec.text, "text")?,
            label: need(&rec.claimed_label, "claimed_label")?,
            condition: rec.condition.unwrap_or_default(),
        },
        TaskKind::Hate => ExampleInputs::Hate {
            text: need(&rec.text, "text")?,
            label: need(&rec.claimed_label, "claimed_label")?,
            target_group: rec.target_group.clone(),
            statement_type: rec.statement_type.clone(),
        },
    })
}

/// Reconstructs a round from an export. The task must already exist and the
/// round must be the task's next index. Nothing is written unless every line
/// checks out.
pub fn import_round<R: BufRead>(store: &Store, input: R, now: DateTime<Utc>) -> Result<ImportSummary> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExportRecord =
            serde_json::from_str(&line).map_err(|e| violation(line_no, e.to_string()))?;
        records.push((line_no, rec));
    }
    let (_, first) = records.first().ok_or_else(|| violation(1, "export is empty"))?;
    let task = store
        .task_by_name(&first.task_name)
        .ok_or_else(|| Error::not_found("task", &first.task_name))?;
    let round_index = first.round_index;
    let endpoint_ids: Vec<String> = first.predictions.iter().map(|p| p.endpoint_id.clone()).collect();
    if endpoint_ids.is_empty() {
        return Err(violation(records[0].0, "record has no predictions"));
    }

    let mut seen = HashSet::new();
    let mut staged = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        let line = *line;
        if rec.task_name != task.name || rec.round_index != round_index {
            return Err(violation(line, "all records must belong to one task and round"));
        }
        if rec.input_kind != task.kind {
            return Err(violation(line, format!("{:?} record in a {:?} task", rec.input_kind, task.kind)));
        }
        if !seen.insert(rec.example_id) || store.contains_example(ExampleId(rec.example_id)) {
            return Err(Error::DuplicateExampleId(rec.example_id));
        }
        let ids: Vec<&str> = rec.predictions.iter().map(|p| p.endpoint_id.as_str()).collect();
        if ids != endpoint_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(violation(line, "prediction endpoints differ from the round's"));
        }
        if rec.verdict.per_endpoint.len() != endpoint_ids.len() || !rec.verdict.is_consistent() {
            return Err(violation(line, "verdict is inconsistent with its policy"));
        }
        let inputs = inputs_of(line, rec)?;
        if let Some(label) = inputs.claimed_label() {
            if !task.has_label(label) {
                return Err(violation(line, format!("label {label:?} is not in the task's label set")));
            }
        }
        if let ExampleInputs::Qa { answer, .. } = &inputs {
            let ctx = rec
                .context_text
                .as_deref()
                .ok_or_else(|| violation(line, "qa record is missing context_text"))?;
            answer.validate(ctx).map_err(|e| violation(line, e.to_string()))?;
        }
        let annotator = rec
            .annotator_pseudonym
            .clone()
            .or_else(|| rec.annotator_id.clone())
            .ok_or_else(|| violation(line, "record has no annotator"))?;
        staged.push((rec, inputs, annotator));
    }

    let existing = store.rounds_for_task(task.task_id);
    if existing.iter().any(|r| r.is_open()) {
        return Err(Error::PreviousRoundOpen);
    }
    if round_index as usize != existing.len() + 1 {
        return Err(violation(
            records[0].0,
            format!("round {round_index} cannot follow {} existing rounds", existing.len()),
        ));
    }

    // Contexts are re-created once per distinct text.
    let mut texts: Vec<String> = staged.iter().filter_map(|(r, _, _)| r.context_text.clone()).collect();
    texts.sort();
    texts.dedup();
    let pool = store.create_pool(
        &format!("{} round {round_index} (imported)", task.name),
        texts.iter().map(|t| (t.clone(), "imported".to_owned())),
    )?;
    let context_ids: BTreeMap<&str, _> = texts
        .iter()
        .map(String::as_str)
        .zip(pool.context_ids.iter().copied())
        .collect();

    let endpoints: Vec<EndpointDescriptor> = endpoint_ids
        .iter()
        .map(|id| EndpointDescriptor::new(id.clone(), String::new(), task.task_type))
        .collect();
    let round = store.insert_round(task.task_id, |round_id, _| {
        Ok(Round {
            round_id,
            task_id: task.task_id,
            index: round_index,
            target_endpoints: endpoints,
            context_pool_id: pool.pool_id,
            status: RoundStatus::Closed,
            opened_at: now,
            closed_at: Some(now),
        })
    })?;

    let mut example_ids = Vec::with_capacity(staged.len());
    for (rec, inputs, annotator) in staged {
        let created_at = rec.created_at.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc();
        let example = Example {
            example_id: ExampleId(rec.example_id),
            round_id: round.round_id,
            task_id: task.task_id,
            annotator_id: annotator,
            context_id: rec.context_text.as_deref().map(|t| context_ids[t]),
            inputs,
            predictions: rec.predictions.clone(),
            verdict: rec.verdict.clone(),
            state: rec.state,
            explanations: rec.explanations.clone(),
            parent_example_id: rec.parent_example_id.map(ExampleId),
            parent_edit_distance: rec.parent_edit_distance,
            provenance: Provenance::Imported,
            created_at,
            resolved_at: None,
        };
        store.put_example(example, None)?;
        example_ids.push(ExampleId(rec.example_id));
    }
    Ok(ImportSummary { round, example_ids })
}
