use super::{AgentError, Agents, IdentityGuard, OpinionSummary, Result};
use crate::gateway::CompletionRequest;
use crate::model::{Channel, CoveredRange, Message};
use crate::template::SUMMARY;

impl Agents {
    /// Digests a window of public messages into the group's current position.
    /// Identifiers are redacted from the window before it reaches the model.
    pub fn summarize(&self, window: &[Message], guard: &IdentityGuard) -> Result<OpinionSummary> {
        let (Some(first), Some(last)) = (window.first(), window.last()) else {
            return Err(AgentError::EmptyWindow);
        };
        if let Some(m) = window.iter().find(|m| m.channel != Channel::Public) {
            return Err(AgentError::NotPublic(m.id));
        }
        let history = window.iter().map(|m| guard.redact(&m.body)).collect();
        let request = CompletionRequest::new(SUMMARY).list("history", history);
        let text = self.gateway.complete(&request)?;
        Ok(OpinionSummary { text, covered_range: CoveredRange { first_seq: first.id, last_seq: last.id } })
    }
}
