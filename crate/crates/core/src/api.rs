//! HTTP/JSON surface, versioned under `/v1`.
//!
//! Every error is an envelope `{code, message, detail}` with a stable `code`.
//! Mutations accept an `Idempotency-Key` header (required for example
//! submission); a repeated key from the same user replays the first
//! successful response instead of acting twice.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::anonymize::Pseudonymizer;
use crate::config::{Role, SeedUser, ServiceConfig};
use crate::error::{Error, GatewayError};
use crate::gateway::{EndpointDescriptor, Gateway};
use crate::metrics::{dataset_stats, LeaderboardEntry};
use crate::model::{ExampleId, Explanations, PoolId, RoundId, TaskConfig, TaskId, TicketId};
use crate::orchestrator::{Orchestrator, Submission};
use crate::storage::Store;
use crate::validation::Judgment;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_token: String,
    pub annotator_id: String,
    pub role: Role,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_owned(),
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn unauthorized(message: &str) -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let status = match &err {
            Error::NotFound { .. } | Error::ParentNotFound(_) => StatusCode::NOT_FOUND,
            Error::Gateway(GatewayError::Timeout { .. }) => StatusCode::GATEWAY_TIMEOUT,
            Error::Gateway(GatewayError::MemberFailure { source, .. })
                if matches!(**source, GatewayError::Timeout { .. }) =>
            {
                StatusCode::GATEWAY_TIMEOUT
            }
            Error::Gateway(_) | Error::EndpointUnhealthy(_) => StatusCode::BAD_GATEWAY,
            Error::DuplicateName(_)
            | Error::VersionConflict { .. }
            | Error::DuplicateExampleId(_)
            | Error::DuplicateVote
            | Error::TicketClosed
            | Error::WrongState { .. }
            | Error::IllegalTransition { .. }
            | Error::PreviousRoundOpen
            | Error::ClosedRound
            | Error::AlreadyClosed => StatusCode::CONFLICT,
            Error::AuthorIsValidator | Error::NotAuthor | Error::NotInPool => StatusCode::FORBIDDEN,
            Error::Io(_) | Error::Serde(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        let detail = match &err {
            Error::Gateway(g) => json!({ "endpoint_id": g.endpoint_id() }),
            Error::EndpointUnhealthy(id) => json!({ "endpoint_id": id }),
            Error::SchemaViolation { line, .. } => json!({ "line": line }),
            _ => Value::Null,
        };
        ApiError {
            status,
            code: err.code().to_owned(),
            message: err.to_string(),
            detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "code": self.code, "message": self.message, "detail": self.detail })),
        )
            .into_response()
    }
}

type ApiResult = Result<(StatusCode, Value), ApiError>;

fn ok<T: Serialize>(status: StatusCode, body: &T) -> ApiResult {
    let value = serde_json::to_value(body).map_err(|e| ApiError::from(Error::Serde(e)))?;
    Ok((status, value))
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid-body", e.to_string()))
}

fn respond(result: ApiResult) -> Response {
    match result {
        Ok((status, value)) => (status, Json(value)).into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Default)]
struct Sessions {
    by_token: RwLock<HashMap<String, Session>>,
}

type Replay = Arc<tokio::sync::Mutex<Option<(StatusCode, Value)>>>;

pub struct AppState {
    pub orchestrator: Arc<Orchestrator>,
    config: ServiceConfig,
    sessions: Sessions,
    idempotency: Mutex<HashMap<String, Replay>>,
}

impl AppState {
    pub fn new(orchestrator: Arc<Orchestrator>, config: ServiceConfig) -> Self {
        AppState {
            orchestrator,
            config,
            sessions: Sessions::default(),
            idempotency: Mutex::default(),
        }
    }

    /// Builds the store, gateway and orchestrator described by `config`.
    pub fn from_config(config: ServiceConfig) -> crate::Result<Self> {
        let store = match &config.storage_path {
            Some(p) => Store::open(p)?,
            None => Store::in_memory(),
        };
        let pseudonyms = match &config.salt {
            Some(s) => Pseudonymizer::new(s.as_bytes().to_vec()),
            None => Pseudonymizer::random(),
        };
        let orchestrator = Orchestrator::new(Arc::new(store), Gateway::new()).with_pseudonyms(pseudonyms);
        Ok(AppState::new(Arc::new(orchestrator), config))
    }

    fn user(&self, id: &str) -> Option<&SeedUser> {
        self.config.users.iter().find(|u| u.id == id)
    }

    /// Issues a session directly, bypassing the secret check.
    pub fn issue_session(&self, user_id: &str, role: Role, ttl: Duration) -> Session {
        let mut raw = [0u8; 24];
        rand::rngs::OsRng.fill_bytes(&mut raw);
        let now = self.orchestrator.now();
        let session = Session {
            session_token: hex::encode(raw),
            annotator_id: user_id.to_owned(),
            role,
            issued_at: now,
            expires_at: now + ttl,
        };
        self.sessions
            .by_token
            .write()
            .insert(session.session_token.clone(), session.clone());
        session
    }

    fn session(&self, headers: &HeaderMap, roles: &[Role]) -> Result<Session, ApiError> {
        let token = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
        let session = self
            .sessions
            .by_token
            .read()
            .get(token)
            .cloned()
            .ok_or_else(|| ApiError::unauthorized("unknown session"))?;
        if session.expires_at <= self.orchestrator.now() {
            return Err(ApiError::unauthorized("session expired"));
        }
        if !roles.is_empty() && !roles.contains(&session.role) {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "forbidden",
                format!("{:?} sessions cannot do this", session.role),
            ));
        }
        Ok(session)
    }

    /// Runs `action` at most once per (user, route, key); repeats replay the
    /// first success. Failures are not cached so clients can retry them.
    async fn idempotent<F, Fut>(&self, session: &Session, route: &str, key: Option<String>, action: F) -> ApiResult
    where
        F: FnOnce() -> Fut,
        Fut: std::future::Future<Output = ApiResult>,
    {
        let Some(key) = key else {
            return action().await;
        };
        let slot = self
            .idempotency
            .lock()
            .entry(format!("{}\u{0}{route}\u{0}{key}", session.annotator_id))
            .or_default()
            .clone();
        let mut guard = slot.lock().await;
        if let Some(done) = guard.as_ref() {
            return Ok(done.clone());
        }
        let result = action().await;
        if let Ok(done) = &result {
            *guard = Some(done.clone());
        }
        result
    }
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty())
        .map(str::to_owned)
}

type AppStateRef = State<Arc<AppState>>;

#[derive(Deserialize)]
struct LoginBody {
    user_id: String,
    secret: String,
    role: Option<Role>,
}

async fn login(State(state): AppStateRef, body: Bytes) -> Response {
    respond((|| {
        let body: LoginBody = parse(&body)?;
        let user = state
            .user(&body.user_id)
            .filter(|u| u.secret == body.secret)
            .ok_or_else(|| ApiError::unauthorized("unknown user or wrong secret"))?;
        let role = match body.role {
            Some(r) if user.roles.contains(&r) => r,
            Some(r) => {
                return Err(ApiError::new(
                    StatusCode::FORBIDDEN,
                    "forbidden",
                    format!("user does not hold the {r:?} role"),
                ))
            }
            None => *user
                .roles
                .first()
                .ok_or_else(|| ApiError::new(StatusCode::FORBIDDEN, "forbidden", "user has no roles"))?,
        };
        let ttl = Duration::seconds(state.config.session_ttl_secs as i64);
        ok(StatusCode::CREATED, &state.issue_session(&user.id, role, ttl))
    })())
}

async fn create_task(State(state): AppStateRef, headers: HeaderMap, body: Bytes) -> Response {
    let result = async {
        let session = state.session(&headers, &[Role::Owner])?;
        let mut raw: Value = parse(&body)?;
        // Fill service defaults before the strict checks.
        if let Some(obj) = raw.as_object_mut() {
            if obj.get("kind").and_then(Value::as_str) == Some("qa") && obj.get("span_f1_threshold").is_none_or(Value::is_null) {
                obj.insert("span_f1_threshold".into(), json!(state.config.default_span_f1_threshold));
            }
            if obj.get("validation_policy").is_none() {
                obj.insert(
                    "validation_policy".into(),
                    json!({ "quorum": state.config.default_quorum, "rule": "majority" }),
                );
            }
        }
        let config: TaskConfig = serde_json::from_value(raw)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid-body", e.to_string()))?;
        state
            .idempotent(&session, "tasks", idempotency_key(&headers), || async {
                ok(StatusCode::CREATED, &state.orchestrator.create_task(config)?)
            })
            .await
    };
    respond(result.await)
}

async fn get_task(State(state): AppStateRef, headers: HeaderMap, Path(task): Path<u64>) -> Response {
    respond((|| {
        state.session(&headers, &[])?;
        ok(StatusCode::OK, &state.orchestrator.store().task(TaskId(task))?)
    })())
}

#[derive(Deserialize)]
struct PoolBody {
    name: String,
    contexts: Vec<PoolContext>,
}

#[derive(Deserialize)]
struct PoolContext {
    text: String,
    #[serde(default)]
    source_tag: String,
}

async fn create_pool(State(state): AppStateRef, headers: HeaderMap, body: Bytes) -> Response {
    let result = async {
        let session = state.session(&headers, &[Role::Owner])?;
        let body: PoolBody = parse(&body)?;
        state
            .idempotent(&session, "pools", idempotency_key(&headers), || async {
                let pool = state
                    .orchestrator
                    .create_context_pool(&body.name, body.contexts.into_iter().map(|c| (c.text, c.source_tag)))?;
                ok(StatusCode::CREATED, &pool)
            })
            .await
    };
    respond(result.await)
}

#[derive(Deserialize)]
struct OpenRoundBody {
    endpoints: Vec<EndpointDescriptor>,
    context_pool_id: PoolId,
}

async fn open_round(State(state): AppStateRef, headers: HeaderMap, Path(task): Path<u64>, body: Bytes) -> Response {
    let result = async {
        let session = state.session(&headers, &[Role::Owner])?;
        let body: OpenRoundBody = parse(&body)?;
        state
            .idempotent(&session, &format!("tasks/{task}/rounds"), idempotency_key(&headers), || async {
                let round = state
                    .orchestrator
                    .open_round(TaskId(task), body.endpoints, body.context_pool_id)
                    .await?;
                ok(StatusCode::CREATED, &round)
            })
            .await
    };
    respond(result.await)
}

async fn close_round(State(state): AppStateRef, headers: HeaderMap, Path(round): Path<u64>) -> Response {
    let result = async {
        let session = state.session(&headers, &[Role::Owner])?;
        state
            .idempotent(&session, &format!("rounds/{round}/close"), idempotency_key(&headers), || async {
                ok(StatusCode::OK, &state.orchestrator.close_round(RoundId(round)).await?)
            })
            .await
    };
    respond(result.await)
}

async fn next_context(State(state): AppStateRef, headers: HeaderMap, Path(round): Path<u64>) -> Response {
    respond((|| {
        let session = state.session(&headers, &[Role::Annotator])?;
        let orch = &state.orchestrator;
        let round = orch.store().round(RoundId(round))?;
        let task = orch.store().task(round.task_id)?;
        if task.condition_assignment_enabled {
            let a = orch.assign_condition(round.round_id, &session.annotator_id)?;
            return ok(
                StatusCode::OK,
                &json!({ "round_id": round.round_id, "condition": a.condition, "context": a.context }),
            );
        }
        if !round.is_open() {
            return Err(Error::ClosedRound.into());
        }
        let pool = orch.store().pool(round.context_pool_id)?;
        if pool.context_ids.is_empty() && !task.kind.needs_context() {
            return ok(StatusCode::OK, &json!({ "round_id": round.round_id, "context": null }));
        }
        let a = orch.sample_context(round.round_id)?;
        ok(
            StatusCode::OK,
            &json!({ "round_id": round.round_id, "context": a.context, "target_label": a.target_label }),
        )
    })())
}

async fn submit_example(State(state): AppStateRef, headers: HeaderMap, Path(round): Path<u64>, body: Bytes) -> Response {
    let result = async {
        let session = state.session(&headers, &[Role::Annotator])?;
        let key = idempotency_key(&headers).ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "missing-idempotency-key",
                "example submission requires an Idempotency-Key header",
            )
        })?;
        let submission: Submission = parse(&body)?;
        state
            .idempotent(&session, &format!("rounds/{round}/examples"), Some(key), || async {
                let outcome = state
                    .orchestrator
                    .submit_example(RoundId(round), &session.annotator_id, submission)
                    .await?;
                ok(StatusCode::CREATED, &outcome)
            })
            .await
    };
    respond(result.await)
}

#[derive(Deserialize)]
struct PerturbationBody {
    text: String,
    label: String,
}

async fn perturb(State(state): AppStateRef, headers: HeaderMap, Path(example): Path<u64>, body: Bytes) -> Response {
    let result = async {
        let session = state.session(&headers, &[Role::Annotator])?;
        let body: PerturbationBody = parse(&body)?;
        state
            .idempotent(&session, &format!("examples/{example}/perturbations"), idempotency_key(&headers), || async {
                let outcome = state
                    .orchestrator
                    .create_perturbation(ExampleId(example), body.text, body.label, &session.annotator_id)
                    .await?;
                ok(StatusCode::CREATED, &outcome)
            })
            .await
    };
    respond(result.await)
}

async fn explain(State(state): AppStateRef, headers: HeaderMap, Path(example): Path<u64>, body: Bytes) -> Response {
    respond((|| {
        let session = state.session(&headers, &[Role::Annotator])?;
        let explanations: Explanations = parse(&body)?;
        let ex = state
            .orchestrator
            .add_explanations(ExampleId(example), &session.annotator_id, explanations)?;
        ok(StatusCode::OK, &json!({ "example_id": ex.example_id, "explanations": ex.explanations }))
    })())
}

async fn next_ticket(State(state): AppStateRef, headers: HeaderMap) -> Response {
    respond((|| {
        let session = state.session(&headers, &[Role::Validator])?;
        let ticket = state.orchestrator.next_ticket(&session.annotator_id)?;
        ok(StatusCode::OK, &json!({ "ticket": ticket }))
    })())
}

#[derive(Deserialize)]
struct VoteBody {
    judgment: Judgment,
    #[serde(default)]
    note: Option<String>,
}

async fn vote(State(state): AppStateRef, headers: HeaderMap, Path(ticket): Path<u64>, body: Bytes) -> Response {
    let result = async {
        let session = state.session(&headers, &[Role::Validator])?;
        let body: VoteBody = parse(&body)?;
        state
            .idempotent(&session, &format!("validation/{ticket}/votes"), idempotency_key(&headers), || async {
                let outcome = state
                    .orchestrator
                    .vote(TicketId(ticket), &session.annotator_id, body.judgment, body.note)?;
                ok(StatusCode::CREATED, &outcome)
            })
            .await
    };
    respond(result.await)
}

async fn stats(State(state): AppStateRef, headers: HeaderMap, Path(task): Path<u64>) -> Response {
    respond((|| {
        state.session(&headers, &[])?;
        ok(StatusCode::OK, &dataset_stats(state.orchestrator.store(), TaskId(task))?)
    })())
}

#[derive(Serialize)]
struct LeaderboardBody {
    entries: Vec<LeaderboardEntry>,
    /// The caller's own public handle.
    your_handle: String,
}

async fn leaderboard(State(state): AppStateRef, headers: HeaderMap, Path(task): Path<u64>) -> Response {
    respond((|| {
        let session = state.session(&headers, &[])?;
        let entries = state.orchestrator.user_leaderboard(TaskId(task))?;
        let your_handle = state.orchestrator.pseudonyms().pseudonym(&session.annotator_id);
        ok(StatusCode::OK, &LeaderboardBody { entries, your_handle })
    })())
}

#[derive(Deserialize)]
struct EvaluateBody {
    endpoint: EndpointDescriptor,
    #[serde(default = "default_gamma")]
    gamma: f64,
}

fn default_gamma() -> f64 {
    1.0
}

async fn evaluate(State(state): AppStateRef, headers: HeaderMap, Path(task): Path<u64>, body: Bytes) -> Response {
    let result = async {
        state.session(&headers, &[])?;
        let body: EvaluateBody = parse(&body)?;
        let evaluation = state
            .orchestrator
            .evaluate(TaskId(task), &body.endpoint, body.gamma)
            .await?;
        ok(StatusCode::OK, &evaluation)
    };
    respond(result.await)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/sessions", post(login))
        .route("/v1/tasks", post(create_task))
        .route("/v1/tasks/{task}", get(get_task))
        .route("/v1/pools", post(create_pool))
        .route("/v1/tasks/{task}/rounds", post(open_round))
        .route("/v1/rounds/{round}/close", post(close_round))
        .route("/v1/rounds/{round}/context", get(next_context))
        .route("/v1/rounds/{round}/examples", post(submit_example))
        .route("/v1/examples/{example}/perturbations", post(perturb))
        .route("/v1/examples/{example}/explanations", post(explain))
        .route("/v1/validation/next", get(next_ticket))
        .route("/v1/validation/{ticket}/votes", post(vote))
        .route("/v1/tasks/{task}/stats", get(stats))
        .route("/v1/tasks/{task}/leaderboard/users", get(leaderboard))
        .route("/v1/tasks/{task}/evaluate", post(evaluate))
        .with_state(state)
        .merge(crate::reference::router())
}

/// Binds and serves until the listener fails. Returns the bound address
/// through `on_bound` before serving.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Serves on an ephemeral localhost port in the background.
pub async fn spawn_local(state: Arc<AppState>) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router(state)).await;
    });
    Ok((addr, handle))
}
