//! The mediation agents: consensus summary, dissent paraphrase, Socratic
//! counterargument and the duplicate checker.
//!
//! Agents hold no per-room state. Everything room-specific (the message window,
//! the dissent being voiced, the identifiers that must not leak) is passed in.

mod conversation;
mod duplicate;
mod identity;
mod paraphrase;
mod similarity;
mod summary;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::model::{CoveredRange, DissentId};

pub use conversation::ends_with_question;
pub use duplicate::DuplicateVerdict;
pub use identity::{IdentityGuard, REDACTION};
pub use similarity::{cosine_similarity, EmbeddingVector, SimilarityError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("summary window is empty")]
    EmptyWindow,
    #[error("message {0} is not a public message")]
    NotPublic(u64),
    #[error("dissent {0} has not been consumed")]
    DissentNotConsumed(DissentId),
    #[error("output still names {token:?} after regeneration")]
    IdentityLeak { token: String },
    #[error("output does not close with a question after regeneration")]
    StructureViolation,
    #[error("similarity threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error("embedding comparison failed: {0}")]
    Embedding(#[from] SimilarityError),
}

impl AgentError {
    /// Errors that come from the model provider rather than the caller.
    pub fn is_provider_failure(&self) -> bool {
        matches!(self, AgentError::Provider(_) | AgentError::Embedding(_))
    }
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

/// The group's emerging position, as digested by the summary agent.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionSummary {
    pub text: String,
    pub covered_range: CoveredRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    FromDissent { dissent_id: DissentId },
    Generated { covered_range: CoveredRange },
}

/// A message the advocate may post, pending the duplicate check.
#[derive(Debug, Clone, PartialEq)]
pub struct AiCandidateMessage {
    pub body: String,
    pub provenance: Provenance,
}

#[derive(Clone)]
pub struct Agents {
    gateway: Arc<Gateway>,
}

impl Agents {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self { gateway }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Runs `generate` up to twice, accepting the first output `check` passes.
    fn generate_checked(
        &self,
        mut generate: impl FnMut() -> Result<String>,
        check: impl Fn(&str) -> std::result::Result<(), AgentError>,
    ) -> Result<String> {
        let first = generate()?;
        if check(&first).is_ok() {
            return Ok(first);
        }
        tracing::debug!("agent output rejected, regenerating once");
        let second = generate()?;
        check(&second)?;
        Ok(second)
    }
}
