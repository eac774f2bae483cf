//! Domain types shared by the store, the agents and the scheduler.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Identifier reserved for messages written by the advocate itself.
pub const SYSTEM_AUTHOR: &str = "system";

/// Public display name of the advocate persona.
pub const ADVOCATE_NAME: &str = "Advocate";

const MAX_ID_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("identifier is empty")]
    Empty,
    #[error("identifier is longer than {MAX_ID_LEN} characters")]
    TooLong,
    #[error("identifier contains invalid character {0:?}")]
    InvalidChar(char),
    #[error("identifier {0:?} is reserved")]
    Reserved(String),
}

fn validate_id(raw: &str) -> Result<(), IdError> {
    if raw.is_empty() {
        return Err(IdError::Empty);
    }
    if raw.chars().count() > MAX_ID_LEN {
        return Err(IdError::TooLong);
    }
    if let Some(c) = raw.chars().find(|c| !(c.is_alphanumeric() || matches!(c, '_' | '-' | '.'))) {
        return Err(IdError::InvalidChar(c));
    }
    Ok(())
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = IdError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(deserializer)?;
                Self::new(&raw).map_err(serde::de::Error::custom)
            }
        }
    };
}

string_id!(
    /// Opaque participant identifier. Letters, digits, `_`, `-` and `.` only,
    /// so the identifier serializes to the same bytes everywhere it appears.
    ParticipantId
);

string_id!(RoomId);

impl ParticipantId {
    pub fn new(raw: &str) -> Result<Self, IdError> {
        validate_id(raw)?;
        let lower = raw.to_lowercase();
        if lower == SYSTEM_AUTHOR || lower == ADVOCATE_NAME.to_lowercase() {
            return Err(IdError::Reserved(raw.to_string()));
        }
        Ok(Self(raw.to_string()))
    }
}

impl RoomId {
    pub fn new(raw: &str) -> Result<Self, IdError> {
        validate_id(raw)?;
        Ok(Self(raw.to_string()))
    }
}

/// Who wrote a message.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Author {
    Participant(ParticipantId),
    System,
}

impl Author {
    pub fn is_system(&self) -> bool {
        matches!(self, Author::System)
    }

    pub fn participant(&self) -> Option<&ParticipantId> {
        match self {
            Author::Participant(id) => Some(id),
            Author::System => None,
        }
    }
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Author::Participant(id) => f.write_str(id.as_str()),
            Author::System => f.write_str(SYSTEM_AUTHOR),
        }
    }
}

impl From<ParticipantId> for Author {
    fn from(id: ParticipantId) -> Self {
        Author::Participant(id)
    }
}

impl Serialize for Author {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Author {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        if raw == SYSTEM_AUTHOR {
            return Ok(Author::System);
        }
        ParticipantId::new(&raw).map(Author::Participant).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Public,
    #[serde(rename = "dm")]
    DirectToAi,
}

/// A single entry of a room's log.
///
/// `id` is gapless over every message of the room, direct messages included.
/// `public_seq` numbers only the public timeline and is what clients see, so
/// the existence of a direct message never shows up as a gap on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    pub public_seq: Option<u64>,
    pub room_id: RoomId,
    pub author: Author,
    pub channel: Channel,
    pub body: String,
    pub created_at: DateTime<Utc>,
}

impl Message {
    pub fn is_public_human(&self) -> bool {
        self.channel == Channel::Public && !self.author.is_system()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DissentId(pub u64);

impl fmt::Display for DissentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dissent-{}", self.0)
    }
}

impl FromStr for DissentId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("dissent-")
            .and_then(|n| n.parse().ok())
            .map(DissentId)
            .ok_or_else(|| format!("invalid dissent id {s:?}"))
    }
}

impl Serialize for DissentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DissentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// A queued minority opinion sent privately to the advocate.
#[derive(Debug, Clone, PartialEq)]
pub struct DissentRecord {
    pub dissent_id: DissentId,
    pub room_id: RoomId,
    pub source_message_id: u64,
    pub sender: ParticipantId,
    pub body: String,
    pub is_used: bool,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("turns_per_intervention must be at least 1")]
    ZeroTurns,
    #[error("similarity_threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("summary_window must be at least 1")]
    ZeroWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediationConfig {
    pub turns_per_intervention: u32,
    pub similarity_threshold: f64,
    pub max_regeneration_attempts: u32,
    pub summary_window: usize,
}

impl Default for MediationConfig {
    fn default() -> Self {
        Self { turns_per_intervention: 8, similarity_threshold: 0.85, max_regeneration_attempts: 2, summary_window: 30 }
    }
}

impl MediationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.turns_per_intervention == 0 {
            return Err(ConfigError::ZeroTurns);
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(ConfigError::Threshold(self.similarity_threshold));
        }
        if self.summary_window == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        Ok(())
    }
}

/// Inclusive range of message ids fed to the summary agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveredRange {
    pub first_seq: u64,
    pub last_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionReason {
    Duplicate,
    ProviderFailure,
    IdentityLeak,
    MalformedOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeKind {
    ParaphrasedDissent { dissent_id: DissentId, message_id: u64 },
    GeneratedCounterargument { message_id: u64, covered_range: CoveredRange },
    Suppressed { reason: SuppressionReason },
}

/// Result of one scheduler firing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    #[serde(flatten)]
    pub kind: OutcomeKind,
    pub attempts_used: u32,
}

impl InterventionOutcome {
    pub fn message_id(&self) -> Option<u64> {
        match self.kind {
            OutcomeKind::ParaphrasedDissent { message_id, .. }
            | OutcomeKind::GeneratedCounterargument { message_id, .. } => Some(message_id),
            OutcomeKind::Suppressed { .. } => None,
        }
    }

    pub fn is_suppressed(&self) -> bool {
        matches!(self.kind, OutcomeKind::Suppressed { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn participant_ids_reject_reserved_and_odd_characters() {
        assert!(ParticipantId::new("alice").is_ok());
        assert!(ParticipantId::new("민수_2").is_ok());
        assert_eq!(ParticipantId::new(""), Err(IdError::Empty));
        assert!(matches!(ParticipantId::new("System"), Err(IdError::Reserved(_))));
        assert!(matches!(ParticipantId::new("advocate"), Err(IdError::Reserved(_))));
        assert_eq!(ParticipantId::new("a b"), Err(IdError::InvalidChar(' ')));
        assert_eq!(ParticipantId::new("a\"b"), Err(IdError::InvalidChar('"')));
        assert_eq!(ParticipantId::new(&"x".repeat(65)), Err(IdError::TooLong));
    }

    #[test]
    fn author_round_trips_through_its_string_form() {
        let a: Author = serde_json::from_str("\"system\"").unwrap();
        assert_eq!(a, Author::System);
        let b: Author = serde_json::from_str("\"bob\"").unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "\"bob\"");
    }

    #[test]
    fn config_defaults_fill_missing_fields() {
        let cfg: MediationConfig = serde_json::from_str(r#"{"turns_per_intervention": 4}"#).unwrap();
        assert_eq!(cfg.turns_per_intervention, 4);
        assert_eq!(cfg.similarity_threshold, 0.85);
        assert_eq!(cfg.max_regeneration_attempts, 2);
        assert_eq!(cfg.summary_window, 30);
        assert!(cfg.validate().is_ok());
        let bad = MediationConfig { similarity_threshold: 1.5, ..cfg.clone() };
        assert_eq!(bad.validate(), Err(ConfigError::Threshold(1.5)));
        let zero = MediationConfig { turns_per_intervention: 0, ..cfg };
        assert_eq!(zero.validate(), Err(ConfigError::ZeroTurns));
    }

    #[test]
    fn outcome_serializes_flat() {
        let o = InterventionOutcome {
            kind: OutcomeKind::ParaphrasedDissent { dissent_id: DissentId(2), message_id: 9 },
            attempts_used: 1,
        };
        let json = serde_json::to_string(&o).unwrap();
        assert_eq!(json, r#"{"kind":"paraphrased_dissent","dissent_id":"dissent-2","message_id":9,"attempts_used":1}"#);
        let back: InterventionOutcome = serde_json::from_str(&json).unwrap();
        assert_eq!(back, o);
    }
}
