//! Literal identity scanning. Matching is case-insensitive substring search,
//! which is stricter than whole-token matching: an id hidden inside a longer
//! word still counts.

use crate::model::{DissentId, ParticipantId};

/// Text substituted for redacted identifiers. Built only from characters that
/// identifiers cannot contain, so a redaction can never introduce a new match.
pub const REDACTION: &str = "[…]";

fn fold(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

#[derive(Debug, Clone, Default)]
pub struct IdentityGuard {
    needles: Vec<Vec<char>>,
}

impl IdentityGuard {
    pub fn new<'a>(participants: impl IntoIterator<Item = &'a ParticipantId>) -> Self {
        let mut guard = Self::default();
        for p in participants {
            guard.add(p.as_str());
        }
        guard
    }

    /// Also scan for these dissent ids.
    pub fn with_dissents(mut self, ids: impl IntoIterator<Item = DissentId>) -> Self {
        for id in ids {
            self.add(&id.to_string());
        }
        self
    }

    /// Also scan for free-form display names.
    pub fn with_names<'a>(mut self, names: impl IntoIterator<Item = &'a str>) -> Self {
        for n in names {
            self.add(n);
        }
        self
    }

    fn add(&mut self, needle: &str) {
        let folded: Vec<char> = needle.trim().chars().map(fold).collect();
        if !folded.is_empty() && !self.needles.contains(&folded) {
            self.needles.push(folded);
            // Longest first so redaction removes whole ids before their substrings.
            self.needles.sort_by_key(|n| std::cmp::Reverse(n.len()));
        }
    }

    fn find_at(haystack: &[char], needle: &[char], from: usize) -> Option<usize> {
        if needle.len() > haystack.len() {
            return None;
        }
        (from..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
    }

    /// First identifier found in `text`, if any.
    pub fn find_leak(&self, text: &str) -> Option<String> {
        let folded: Vec<char> = text.chars().map(fold).collect();
        self.needles.iter().find(|n| Self::find_at(&folded, n, 0).is_some()).map(|n| n.iter().collect())
    }

    pub fn redact(&self, text: &str) -> String {
        let mut chars: Vec<char> = text.chars().collect();
        for needle in &self.needles {
            let mut from = 0;
            loop {
                let folded: Vec<char> = chars.iter().copied().map(fold).collect();
                let Some(at) = Self::find_at(&folded, needle, from) else { break };
                let replacement: Vec<char> = REDACTION.chars().collect();
                chars.splice(at..at + needle.len(), replacement.iter().copied());
                from = at + replacement.len();
            }
        }
        chars.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn guard(ids: &[&str]) -> IdentityGuard {
        let ids: Vec<_> = ids.iter().map(|s| ParticipantId::new(s).unwrap()).collect();
        IdentityGuard::new(&ids)
    }

    #[test]
    fn finds_ids_regardless_of_case() {
        let g = guard(&["alice", "bob_7"]);
        assert_eq!(g.find_leak("I think BOB_7 is right"), Some("bob_7".into()));
        assert_eq!(g.find_leak("nobody here"), None);
        assert_eq!(g.find_leak("malice"), Some("alice".into()));
    }

    #[test]
    fn redaction_removes_every_occurrence() {
        let g = guard(&["alice", "ali"]);
        let out = g.redact("Alice and ALI agree with alice.");
        assert_eq!(out, "[…] and […] agree with […].");
        assert_eq!(g.find_leak(&out), None);
    }

    #[test]
    fn dissent_ids_and_names_are_scanned() {
        let g = guard(&["u1x"]).with_dissents([DissentId(4)]).with_names(["Kim Minsu"]);
        assert!(g.find_leak("see dissent-4").is_some());
        assert!(g.find_leak("as kim minsu said").is_some());
    }
}
