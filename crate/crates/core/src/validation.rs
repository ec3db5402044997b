//! Quorum validation of judged examples.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AgreementRule, Example, ExampleId, LifecycleEvent, LifecycleState, TicketId, ValidationPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Correct,
    Incorrect,
    Flag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Open,
    Agree,
    Disagree,
    Flagged,
}

impl Resolution {
    /// The lifecycle event a closed ticket feeds back into its example.
    pub fn event(self) -> Option<LifecycleEvent> {
        match self {
            Resolution::Open => None,
            Resolution::Agree => Some(LifecycleEvent::ValidationResolvedAgree),
            Resolution::Disagree => Some(LifecycleEvent::ValidationResolvedDisagree),
            Resolution::Flagged => Some(LifecycleEvent::Flagged),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub validator_id: String,
    pub judgment: Judgment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationTicket {
    pub ticket_id: TicketId,
    pub example_id: ExampleId,
    /// Kept so the author can be excluded; never leaves the service.
    pub author_id: String,
    pub required_quorum: u32,
    pub rule: AgreementRule,
    pub votes: Vec<Vote>,
    pub resolution: Resolution,
}

impl ValidationTicket {
    pub fn is_open(&self) -> bool {
        self.resolution == Resolution::Open
    }

    pub fn has_voted(&self, validator_id: &str) -> bool {
        self.votes.iter().any(|v| v.validator_id == validator_id)
    }

    /// Whether `validator_id` may be served this ticket.
    pub fn eligible(&self, validator_id: &str) -> bool {
        self.is_open() && self.author_id != validator_id && !self.has_voted(validator_id)
    }
}

/// Opens a ticket for an example awaiting validation.
pub fn enqueue(
    ticket_id: TicketId,
    example: &Example,
    policy: ValidationPolicy,
) -> Result<ValidationTicket> {
    if example.state != LifecycleState::PendingValidation {
        return Err(Error::WrongState {
            example: example.example_id.to_string(),
            expected: LifecycleState::PendingValidation,
            actual: example.state,
        });
    }
    Ok(ValidationTicket {
        ticket_id,
        example_id: example.example_id,
        author_id: example.annotator_id.clone(),
        required_quorum: policy.quorum,
        rule: policy.rule,
        votes: Vec::new(),
        resolution: Resolution::Open,
    })
}

/// Appends a vote and resolves the ticket once it is flagged or reaches quorum.
pub fn record_vote(
    ticket: &ValidationTicket,
    validator_id: &str,
    judgment: Judgment,
    note: Option<String>,
    at: DateTime<Utc>,
) -> Result<ValidationTicket> {
    if !ticket.is_open() {
        return Err(Error::TicketClosed);
    }
    if ticket.author_id == validator_id {
        return Err(Error::AuthorIsValidator);
    }
    if ticket.has_voted(validator_id) {
        return Err(Error::DuplicateVote);
    }
    let mut next = ticket.clone();
    next.votes.push(Vote {
        validator_id: validator_id.to_owned(),
        judgment,
        note,
        at,
    });
    if judgment == Judgment::Flag {
        next.resolution = Resolution::Flagged;
    } else if next.votes.len() == next.required_quorum as usize {
        let judgments: Vec<Judgment> = next.votes.iter().map(|v| v.judgment).collect();
        next.resolution = resolve(&judgments, next.rule, next.required_quorum)?;
    }
    Ok(next)
}

/// Consensus over exactly `quorum` non-flag votes.
pub fn resolve(votes: &[Judgment], rule: AgreementRule, quorum: u32) -> Result<Resolution> {
    if votes.len() != quorum as usize || votes.contains(&Judgment::Flag) {
        return Err(Error::InsufficientVotes {
            required: quorum,
            got: votes.iter().filter(|j| **j != Judgment::Flag).count(),
        });
    }
    let correct = votes.iter().filter(|j| **j == Judgment::Correct).count();
    let agree = match rule {
        AgreementRule::Majority => 2 * correct > quorum as usize,
        AgreementRule::Unanimous => correct == quorum as usize,
    };
    Ok(if agree {
        Resolution::Agree
    } else {
        Resolution::Disagree
    })
}

/// Least-voted eligible ticket first, ties by ticket id.
pub fn select_next<'a, I>(tickets: I, validator_id: &str) -> Option<&'a ValidationTicket>
where
    I: IntoIterator<Item = &'a ValidationTicket>,
{
    tickets
        .into_iter()
        .filter(|t| t.eligible(validator_id))
        .min_by_key(|t| (t.votes.len(), t.ticket_id))
}
