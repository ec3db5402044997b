use thiserror::Error;

use crate::model::{LifecycleEvent, LifecycleState};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures talking to a model endpoint.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("endpoint {endpoint_id} timed out after {timeout_ms} ms")]
    Timeout { endpoint_id: String, timeout_ms: u64 },
    #[error("endpoint {endpoint_id} unreachable: {message}")]
    Unreachable { endpoint_id: String, message: String },
    #[error("endpoint {endpoint_id} returned a malformed response: {message}")]
    MalformedResponse { endpoint_id: String, message: String },
    #[error("endpoint {endpoint_id} returned an invalid distribution: {message}")]
    DistributionInvalid { endpoint_id: String, message: String },
    #[error("ensemble member {endpoint_id} failed: {source}")]
    MemberFailure {
        endpoint_id: String,
        #[source]
        source: Box<GatewayError>,
    },
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Timeout { .. } => "timeout",
            GatewayError::Unreachable { .. } => "endpoint-unreachable",
            GatewayError::MalformedResponse { .. } => "malformed-response",
            GatewayError::DistributionInvalid { .. } => "distribution-invalid",
            GatewayError::MemberFailure { .. } => "member-failure",
        }
    }

    pub fn endpoint_id(&self) -> &str {
        match self {
            GatewayError::Timeout { endpoint_id, .. }
            | GatewayError::Unreachable { endpoint_id, .. }
            | GatewayError::MalformedResponse { endpoint_id, .. }
            | GatewayError::DistributionInvalid { endpoint_id, .. }
            | GatewayError::MemberFailure { endpoint_id, .. } => endpoint_id,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    // task configuration
    #[error("a task named {0:?} already exists")]
    DuplicateName(String),
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("span extraction tasks require a span F1 threshold")]
    MissingThreshold,
    #[error("invalid task configuration: {0}")]
    InvalidConfig(String),

    // lifecycle
    #[error("illegal transition: {event:?} from {from:?}")]
    IllegalTransition {
        from: LifecycleState,
        event: LifecycleEvent,
    },
    #[error("example {example} is in state {actual:?}, expected {expected:?}")]
    WrongState {
        example: String,
        expected: LifecycleState,
        actual: LifecycleState,
    },

    // judging
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("ensemble verdict list is empty")]
    EmptyList,

    // validation
    #[error("validator already voted on this ticket")]
    DuplicateVote,
    #[error("the example author cannot validate their own example")]
    AuthorIsValidator,
    #[error("ticket is already resolved")]
    TicketClosed,
    #[error("resolution needs exactly {required} non-flag votes, got {got}")]
    InsufficientVotes { required: u32, got: usize },

    // metrics
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("error count {errors} exceeds total {total}")]
    CountExceedsTotal { errors: u64, total: u64 },
    #[error("length mismatch: {left} predictions vs {right} golds")]
    LengthMismatch { left: usize, right: usize },
    #[error("no predictions to score")]
    Empty,
    #[error("discount factor {0} is outside (0, 1]")]
    GammaOutOfRange(f64),
    #[error("initial and human performance coincide")]
    Degenerate,

    // storage
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("version conflict on {kind} {id}: expected {expected}, found {found}")]
    VersionConflict {
        kind: &'static str,
        id: String,
        expected: u64,
        found: u64,
    },
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("duplicate example id {0}")]
    DuplicateExampleId(u64),

    // rounds
    #[error("the previous round of this task is still open")]
    PreviousRoundOpen,
    #[error("endpoint {0} failed its health probe")]
    EndpointUnhealthy(String),
    #[error("context pool is empty")]
    EmptyPool,
    #[error("condition assignment is disabled for this task")]
    ConditionsDisabled,
    #[error("invalid span: {0}")]
    InvalidSpan(String),
    #[error("round is closed")]
    ClosedRound,
    #[error("round is already closed")]
    AlreadyClosed,
    #[error("perturbation must flip the parent's label")]
    SameLabel,
    #[error("parent example {0} not found")]
    ParentNotFound(u64),
    #[error("annotator is not in this task's pool")]
    NotInPool,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("only the author may do this")]
    NotAuthor,

    #[error(transparent)]
    Gateway(#[from] GatewayError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn not_found(kind: &'static str, id: impl ToString) -> Self {
        Error::NotFound {
            kind,
            id: id.to_string(),
        }
    }

    /// Stable machine-readable name, used in API error envelopes.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateName(_) => "duplicate-name",
            Error::InvalidLabelSet(_) => "invalid-label-set",
            Error::MissingThreshold => "missing-threshold",
            Error::InvalidConfig(_) => "invalid-config",
            Error::IllegalTransition { .. } => "illegal-transition",
            Error::WrongState { .. } => "wrong-state",
            Error::UnknownLabel(_) => "unknown-label",
            Error::EmptyList => "empty-list",
            Error::DuplicateVote => "duplicate-vote",
            Error::AuthorIsValidator => "author-is-validator",
            Error::TicketClosed => "ticket-closed",
            Error::InsufficientVotes { .. } => "insufficient-votes",
            Error::EmptyDataset => "empty-dataset",
            Error::CountExceedsTotal { .. } => "count-exceeds-total",
            Error::LengthMismatch { .. } => "length-mismatch",
            Error::Empty => "empty",
            Error::GammaOutOfRange(_) => "gamma-out-of-range",
            Error::Degenerate => "degenerate",
            Error::NotFound { .. } => "not-found",
            Error::VersionConflict { .. } => "version-conflict",
            Error::SchemaViolation { .. } => "schema-violation",
            Error::DuplicateExampleId(_) => "duplicate-example-id",
            Error::PreviousRoundOpen => "previous-round-open",
            Error::EndpointUnhealthy(_) => "endpoint-unhealthy",
            Error::EmptyPool => "empty-pool",
            Error::ConditionsDisabled => "conditions-disabled",
            Error::InvalidSpan(_) => "invalid-span",
            Error::ClosedRound => "closed-round",
            Error::AlreadyClosed => "already-closed",
            Error::SameLabel => "same-label",
            Error::ParentNotFound(_) => "parent-not-found",
            Error::NotInPool => "not-in-pool",
            Error::InvalidInput(_) => "invalid-input",
            Error::NotAuthor => "not-author",
            Error::Gateway(g) => g.code(),
            Error::Io(_) => "io",
            Error::Serde(_) => "serialization",
        }
    }
}
