use super::{AgentError, Agents, AiCandidateMessage, IdentityGuard, OpinionSummary, Provenance, Result};
use crate::gateway::CompletionRequest;
use crate::model::DissentRecord;
use crate::template::PARAPHRASE;

impl Agents {
    /// Restates a consumed dissent in the advocate's own voice.
    ///
    /// Identifiers in the dissent are redacted before it reaches the
    /// provider. The output is scanned again; a hit triggers one regeneration
    /// and then [`AgentError::IdentityLeak`].
    pub fn paraphrase_dissent(
        &self,
        record: &DissentRecord,
        context: &OpinionSummary,
        guard: &IdentityGuard,
    ) -> Result<AiCandidateMessage> {
        if !record.is_used {
            return Err(AgentError::DissentNotConsumed(record.dissent_id));
        }
        let request = CompletionRequest::new(PARAPHRASE)
            .text("dissent", guard.redact(&record.body))
            .text("summary", context.text.clone());
        let body = self.generate_checked(
            || Ok(self.gateway.complete(&request)?),
            |text| match guard.find_leak(text) {
                Some(token) => Err(AgentError::IdentityLeak { token }),
                None => Ok(()),
            },
        )?;
        Ok(AiCandidateMessage { body, provenance: Provenance::FromDissent { dissent_id: record.dissent_id } })
    }
}
