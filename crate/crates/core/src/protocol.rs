//! Wire frames. Each frame is one JSON object; the transport adds framing.
//!
//! Advocate messages are sent as [`ServerFrame::AiMessage`], which has no
//! sender field and never carries a dissent id: the only author it can name is
//! the fixed [`ADVOCATE_NAME`](crate::model::ADVOCATE_NAME) persona.

use serde::{Deserialize, Serialize};

/// Frames sent by clients. Identifiers arrive as plain strings and are
/// validated by the hub, so a bad id gets a specific error instead of a
/// generic parse failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientFrame {
    Join {
        room_id: String,
        sender: String,
    },
    PostPublic {
        room_id: String,
        sender: String,
        body: String,
    },
    #[serde(rename = "post_dm")]
    PostDm {
        room_id: String,
        sender: String,
        body: String,
    },
    Pong {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckKind {
    Join,
    PostPublic,
    #[serde(rename = "post_dm")]
    PostDm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedFrame,
    InvalidId,
    UnknownRoom,
    DuplicateParticipantId,
    AlreadyJoined,
    NotJoined,
    EmptyBody,
    Backpressure,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Broadcast {
        room_id: String,
        seq: u64,
        sender: String,
        body: String,
    },
    AiMessage {
        room_id: String,
        seq: u64,
        author: String,
        body: String,
    },
    /// `seq` is the join watermark for `join` and the message's public
    /// sequence number for `post_public`; absent for `post_dm`.
    Ack {
        room_id: String,
        of: AckKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
    Ping {},
}

impl ServerFrame {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerFrame::Error { code, message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    /// Public sequence number for timeline frames.
    pub fn seq(&self) -> Option<u64> {
        match self {
            ServerFrame::Broadcast { seq, .. } | ServerFrame::AiMessage { seq, .. } => Some(*seq),
            _ => None,
        }
    }
}

impl ClientFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }
}
