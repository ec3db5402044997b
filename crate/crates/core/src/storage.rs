//! Keyed storage for every entity, with optimistic versioning on examples and
//! tickets and an optional JSON snapshot on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Context, ContextId, ContextPool, Example, ExampleId, PoolId, Round, RoundId, Task, TaskConfig,
    TaskId, TicketId,
};
use crate::validation::ValidationTicket;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub version: u64,
    pub value: T,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Counters {
    task: u64,
    round: u64,
    context: u64,
    pool: u64,
    example: u64,
    ticket: u64,
}

fn bump(counter: &mut u64) -> u64 {
    *counter += 1;
    *counter
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StoreData {
    counters: Counters,
    tasks: BTreeMap<TaskId, Task>,
    rounds: BTreeMap<RoundId, Round>,
    contexts: BTreeMap<ContextId, Context>,
    pools: BTreeMap<PoolId, ContextPool>,
    examples: BTreeMap<ExampleId, Versioned<Example>>,
    tickets: BTreeMap<TicketId, Versioned<ValidationTicket>>,
    /// Condition assignments handed out, per task and annotator.
    assignments: BTreeMap<TaskId, BTreeMap<String, u64>>,
}

/// Thread-safe entity store. Every write goes through one lock, so readers
/// always see committed versions.
#[derive(Debug, Default)]
pub struct Store {
    data: RwLock<StoreData>,
    path: Option<PathBuf>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store::default()
    }

    /// Opens (or starts) a store persisted as a JSON snapshot at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let data = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?)?
        } else {
            StoreData::default()
        };
        Ok(Store {
            data: RwLock::new(data),
            path: Some(path),
        })
    }

    fn write<T>(&self, f: impl FnOnce(&mut StoreData) -> Result<T>) -> Result<T> {
        let mut data = self.data.write();
        let out = f(&mut data)?;
        if let Some(path) = &self.path {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, serde_json::to_vec(&*data)?)?;
            fs::rename(&tmp, path)?;
        }
        Ok(out)
    }

    // tasks

    pub fn create_task(&self, config: TaskConfig) -> Result<Task> {
        self.write(|d| {
            if d.tasks.values().any(|t| t.name == config.name) {
                return Err(Error::DuplicateName(config.name));
            }
            let task = Task::from_config(TaskId(d.counters.task + 1), config)?;
            bump(&mut d.counters.task);
            d.tasks.insert(task.task_id, task.clone());
            Ok(task)
        })
    }

    pub fn task(&self, id: TaskId) -> Result<Task> {
        self.data
            .read()
            .tasks
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::not_found("task", id))
    }

    pub fn task_by_name(&self, name: &str) -> Option<Task> {
        self.data.read().tasks.values().find(|t| t.name == name).cloned()
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.data.read().tasks.values().cloned().collect()
    }

    // contexts

    pub fn create_pool<I, S, T>(&self, name: &str, contexts: I) -> Result<ContextPool>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let contexts: Vec<(String, String)> =
            contexts.into_iter().map(|(a, b)| (a.into(), b.into())).collect();
        if contexts.iter().any(|(text, _)| text.trim().is_empty()) {
            return Err(Error::InvalidInput("context text is empty".into()));
        }
        self.write(|d| {
            let pool_id = PoolId(bump(&mut d.counters.pool));
            let mut ids = Vec::with_capacity(contexts.len());
            for (text, source_tag) in contexts {
                let context_id = ContextId(bump(&mut d.counters.context));
                d.contexts.insert(
                    context_id,
                    Context {
                        context_id,
                        text,
                        source_tag,
                        usage_count: 0,
                        served_labels: BTreeMap::new(),
                    },
                );
                ids.push(context_id);
            }
            let pool = ContextPool {
                pool_id,
                name: name.to_owned(),
                context_ids: ids,
            };
            d.pools.insert(pool_id, pool.clone());
            Ok(pool)
        })
    }

    pub fn pool(&self, id: PoolId) -> Result<ContextPool> {
        self.data
            .read()
            .pools
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::not_found("context pool", id))
    }

    pub fn context(&self, id: ContextId) -> Result<Context> {
        self.data
            .read()
            .contexts
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::not_found("context", id))
    }

    /// Atomically picks a context from a pool and records the pick.
    ///
    /// `choose` sees the pool's contexts in pool order and returns the index of
    /// the chosen one plus an optional target label to count against it.
    pub fn take_context<F>(&self, pool_id: PoolId, choose: F) -> Result<(Context, Option<String>)>
    where
        F: FnOnce(&[&Context]) -> Option<(usize, Option<String>)>,
    {
        self.write(|d| {
            let pool = d
                .pools
                .get(&pool_id)
                .ok_or_else(|| Error::not_found("context pool", pool_id))?;
            let candidates: Vec<&Context> =
                pool.context_ids.iter().filter_map(|id| d.contexts.get(id)).collect();
            let (idx, label) = choose(&candidates).ok_or(Error::EmptyPool)?;
            let id = candidates[idx].context_id;
            let ctx = d.contexts.get_mut(&id).expect("context listed in pool");
            ctx.usage_count += 1;
            if let Some(label) = &label {
                *ctx.served_labels.entry(label.clone()).or_default() += 1;
            }
            Ok((ctx.clone(), label))
        })
    }

    /// Returns how many condition assignments this annotator had before this call.
    pub fn next_assignment(&self, task_id: TaskId, annotator_id: &str) -> Result<u64> {
        self.write(|d| {
            let n = d
                .assignments
                .entry(task_id)
                .or_default()
                .entry(annotator_id.to_owned())
                .or_default();
            let before = *n;
            *n += 1;
            Ok(before)
        })
    }

    // rounds

    /// Inserts a round built by `build` from a fresh id. `build` runs under the
    /// write lock and sees the task's existing rounds in index order.
    pub fn insert_round<F>(&self, task_id: TaskId, build: F) -> Result<Round>
    where
        F: FnOnce(RoundId, &[&Round]) -> Result<Round>,
    {
        self.write(|d| {
            if !d.tasks.contains_key(&task_id) {
                return Err(Error::not_found("task", task_id));
            }
            let mut existing: Vec<&Round> =
                d.rounds.values().filter(|r| r.task_id == task_id).collect();
            existing.sort_by_key(|r| r.index);
            let round = build(RoundId(d.counters.round + 1), &existing)?;
            bump(&mut d.counters.round);
            d.rounds.insert(round.round_id, round.clone());
            Ok(round)
        })
    }

    /// Read-modify-write on one round under the store lock.
    pub fn update_round<F>(&self, id: RoundId, f: F) -> Result<Round>
    where
        F: FnOnce(&Round) -> Result<Round>,
    {
        self.write(|d| {
            let current = d.rounds.get(&id).ok_or_else(|| Error::not_found("round", id))?;
            let next = f(current)?;
            d.rounds.insert(id, next.clone());
            Ok(next)
        })
    }

    pub fn round(&self, id: RoundId) -> Result<Round> {
        self.data
            .read()
            .rounds
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::not_found("round", id))
    }

    pub fn rounds_for_task(&self, task_id: TaskId) -> Vec<Round> {
        let mut rounds: Vec<Round> = self
            .data
            .read()
            .rounds
            .values()
            .filter(|r| r.task_id == task_id)
            .cloned()
            .collect();
        rounds.sort_by_key(|r| r.index);
        rounds
    }

    // examples

    pub fn allocate_example_id(&self) -> Result<ExampleId> {
        self.write(|d| Ok(ExampleId(bump(&mut d.counters.example))))
    }

    /// Writes an example. `expected_version` is `None` for a new example and
    /// otherwise must equal the stored version. Returns the new version.
    pub fn put_example(&self, example: Example, expected_version: Option<u64>) -> Result<u64> {
        self.write(|d| {
            let id = example.example_id;
            let found = d.examples.get(&id).map(|v| v.version);
            match (expected_version, found) {
                (None, Some(_)) => return Err(Error::DuplicateExampleId(id.0)),
                (Some(expected), found) if Some(expected) != found => {
                    return Err(Error::VersionConflict {
                        kind: "example",
                        id: id.to_string(),
                        expected,
                        found: found.unwrap_or(0),
                    })
                }
                _ => {}
            }
            if !d.rounds.contains_key(&example.round_id) {
                return Err(Error::not_found("round", example.round_id));
            }
            let version = found.unwrap_or(0) + 1;
            d.counters.example = d.counters.example.max(id.0);
            d.examples.insert(id, Versioned { version, value: example });
            Ok(version)
        })
    }

    pub fn get_example(&self, id: ExampleId) -> Result<Versioned<Example>> {
        self.data
            .read()
            .examples
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::not_found("example", id))
    }

    pub fn contains_example(&self, id: ExampleId) -> bool {
        self.data.read().examples.contains_key(&id)
    }

    /// Examples of one round, sorted by id.
    pub fn list_by_round(&self, round_id: RoundId) -> Vec<Example> {
        self.data
            .read()
            .examples
            .values()
            .filter(|v| v.value.round_id == round_id)
            .map(|v| v.value.clone())
            .collect()
    }

    pub fn list_by_task(&self, task_id: TaskId) -> Vec<Example> {
        self.data
            .read()
            .examples
            .values()
            .filter(|v| v.value.task_id == task_id)
            .map(|v| v.value.clone())
            .collect()
    }

    pub fn example_count(&self) -> usize {
        self.data.read().examples.len()
    }

    // tickets

    pub fn insert_ticket<F>(&self, build: F) -> Result<ValidationTicket>
    where
        F: FnOnce(TicketId) -> Result<ValidationTicket>,
    {
        self.write(|d| {
            let ticket = build(TicketId(d.counters.ticket + 1))?;
            bump(&mut d.counters.ticket);
            d.tickets.insert(
                ticket.ticket_id,
                Versioned {
                    version: 1,
                    value: ticket.clone(),
                },
            );
            Ok(ticket)
        })
    }

    pub fn put_ticket(&self, ticket: ValidationTicket, expected_version: u64) -> Result<u64> {
        self.write(|d| {
            let id = ticket.ticket_id;
            let current = d.tickets.get(&id).ok_or_else(|| Error::not_found("ticket", id))?;
            if current.version != expected_version {
                return Err(Error::VersionConflict {
                    kind: "ticket",
                    id: id.to_string(),
                    expected: expected_version,
                    found: current.version,
                });
            }
            let version = expected_version + 1;
            d.tickets.insert(id, Versioned { version, value: ticket });
            Ok(version)
        })
    }

    pub fn get_ticket(&self, id: TicketId) -> Result<Versioned<ValidationTicket>> {
        self.data
            .read()
            .tickets
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::not_found("ticket", id))
    }

    pub fn tickets(&self) -> Vec<ValidationTicket> {
        self.data.read().tickets.values().map(|v| v.value.clone()).collect()
    }

    pub fn open_tickets(&self) -> Vec<ValidationTicket> {
        self.data
            .read()
            .tickets
            .values()
            .filter(|v| v.value.is_open())
            .map(|v| v.value.clone())
            .collect()
    }
}
