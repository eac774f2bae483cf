use super::{AgentError, Agents, AiCandidateMessage, IdentityGuard, OpinionSummary, Provenance, Result};
use crate::gateway::CompletionRequest;
use crate::template::COUNTERARGUMENT;

/// True when the text closes on a question, ignoring trailing whitespace and
/// closing quotes or brackets.
pub fn ends_with_question(text: &str) -> bool {
    text.trim_end().trim_end_matches(['"', '\'', '\u{201d}', '\u{2019}', ')', ']', '*']).ends_with(['?', '\u{ff1f}'])
}

impl Agents {
    /// Produces the advocate's own counterargument to the summarized consensus.
    ///
    /// The template asks for acknowledgement, then a counterpoint, then a
    /// closing question. Only the closing question is checked on the output;
    /// a violation or identity leak gets one regeneration.
    pub fn generate_counterargument(
        &self,
        summary: &OpinionSummary,
        guard: &IdentityGuard,
    ) -> Result<AiCandidateMessage> {
        let request = CompletionRequest::new(COUNTERARGUMENT).text("summary", summary.text.clone());
        let body = self.generate_checked(
            || Ok(self.gateway.complete(&request)?),
            |text| {
                if let Some(token) = guard.find_leak(text) {
                    return Err(AgentError::IdentityLeak { token });
                }
                if !ends_with_question(text) {
                    return Err(AgentError::StructureViolation);
                }
                Ok(())
            },
        )?;
        Ok(AiCandidateMessage { body, provenance: Provenance::Generated { covered_range: summary.covered_range } })
    }
}
