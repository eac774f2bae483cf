use super::{cosine_similarity, AgentError, Agents, AiCandidateMessage, Result};
use crate::model::Message;

#[derive(Debug, Clone, PartialEq)]
pub struct DuplicateVerdict {
    /// `None` when there was nothing to compare against.
    pub max_similarity: Option<f64>,
    pub is_duplicate: bool,
    pub nearest_ai_message_id: Option<u64>,
}

impl Agents {
    /// Compares the candidate against every advocate message in `prior`.
    /// Non-advocate messages are ignored. A similarity equal to the threshold
    /// counts as a duplicate.
    pub fn check_duplicate(
        &self,
        candidate: &AiCandidateMessage,
        prior: &[Message],
        threshold: f64,
    ) -> Result<DuplicateVerdict> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(AgentError::InvalidThreshold(threshold));
        }
        let mut best: Option<(f64, u64)> = None;
        let ai_messages: Vec<&Message> = prior.iter().filter(|m| m.author.is_system()).collect();
        if ai_messages.is_empty() {
            return Ok(DuplicateVerdict { max_similarity: None, is_duplicate: false, nearest_ai_message_id: None });
        }
        let embedded = self.gateway.embed(&candidate.body)?;
        for m in ai_messages {
            let other = self.gateway.embed(&m.body)?;
            let s = cosine_similarity(&embedded, &other)?;
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, m.id));
            }
        }
        let (max, nearest) = best.expect("at least one prior message");
        Ok(DuplicateVerdict {
            max_similarity: Some(max),
            is_duplicate: max >= threshold,
            nearest_ai_message_id: Some(nearest),
        })
    }
}
