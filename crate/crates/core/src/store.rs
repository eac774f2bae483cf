//! Room state and the append-only event log.
//!
//! Every mutation is first written to the journal as one JSON line and then
//! applied to the in-memory index, all while holding the room's lock. Opening
//! an existing journal replays it through the same `apply` path, so a store
//! rebuilt from disk is indistinguishable from the one that wrote it.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::model::{
    Author, Channel, ConfigError, DissentId, DissentRecord, InterventionOutcome, MediationConfig, Message,
    ParticipantId, RoomId,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("room {0} not found")]
    RoomNotFound(RoomId),
    #[error("room {0} already exists")]
    RoomExists(RoomId),
    #[error("participant {0} is not a member of the room")]
    UnknownParticipant(ParticipantId),
    #[error("participant {0} already joined the room")]
    DuplicateParticipant(ParticipantId),
    #[error("message body is empty")]
    EmptyBody,
    #[error("the advocate cannot send direct messages")]
    SystemDirectMessage,
    #[error("window size must be at least 1")]
    EmptyWindow,
    #[error(transparent)]
    InvalidConfig(#[from] ConfigError),
    #[error("journal line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record_type", rename_all = "snake_case")]
pub enum LogRecord {
    RoomCreated {
        room_id: RoomId,
        config: MediationConfig,
        created_at: DateTime<Utc>,
    },
    ParticipantJoined {
        room_id: RoomId,
        participant: ParticipantId,
        created_at: DateTime<Utc>,
    },
    Message {
        seq: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        public_seq: Option<u64>,
        room_id: RoomId,
        author: Author,
        channel: Channel,
        body: String,
        created_at: DateTime<Utc>,
    },
    /// `seq` is the id of the direct message the dissent came from.
    DissentMarkUsed {
        seq: u64,
        room_id: RoomId,
        dissent_id: DissentId,
        created_at: DateTime<Utc>,
    },
    InterventionOutcome {
        room_id: RoomId,
        #[serde(flatten)]
        outcome: InterventionOutcome,
        created_at: DateTime<Utc>,
    },
}

impl LogRecord {
    pub fn room_id(&self) -> &RoomId {
        match self {
            LogRecord::RoomCreated { room_id, .. }
            | LogRecord::ParticipantJoined { room_id, .. }
            | LogRecord::Message { room_id, .. }
            | LogRecord::DissentMarkUsed { room_id, .. }
            | LogRecord::InterventionOutcome { room_id, .. } => room_id,
        }
    }

    fn from_message(m: &Message) -> Self {
        LogRecord::Message {
            seq: m.id,
            public_seq: m.public_seq,
            room_id: m.room_id.clone(),
            author: m.author.clone(),
            channel: m.channel,
            body: m.body.clone(),
            created_at: m.created_at,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }
}

/// Snapshot of a room's bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomState {
    pub room_id: RoomId,
    pub participants: BTreeSet<ParticipantId>,
    pub next_seq: u64,
    pub next_public_seq: u64,
    pub human_turns_since_last_ai: u32,
    /// Id of the last message that existed when the previous intervention
    /// concluded (0 before the first one).
    pub last_intervention_seq: u64,
    pub config: MediationConfig,
}

/// Callback invoked for every appended message, on the room's serialized path.
pub type Listener = Box<dyn Fn(&Message) + Send + Sync>;

struct RoomEntry {
    state: RoomState,
    messages: Vec<Message>,
    dissents: Vec<DissentRecord>,
    outcomes: Vec<InterventionOutcome>,
    listeners: Vec<Listener>,
}

impl RoomEntry {
    fn new(room_id: RoomId, config: MediationConfig) -> Self {
        Self {
            state: RoomState {
                room_id,
                participants: BTreeSet::new(),
                next_seq: 1,
                next_public_seq: 1,
                human_turns_since_last_ai: 0,
                last_intervention_seq: 0,
                config,
            },
            messages: Vec::new(),
            dissents: Vec::new(),
            outcomes: Vec::new(),
            listeners: Vec::new(),
        }
    }

    fn apply(&mut self, record: &LogRecord) {
        match record {
            LogRecord::RoomCreated { .. } => {}
            LogRecord::ParticipantJoined { participant, .. } => {
                self.state.participants.insert(participant.clone());
            }
            LogRecord::Message { seq, public_seq, room_id, author, channel, body, created_at } => {
                let message = Message {
                    id: *seq,
                    public_seq: *public_seq,
                    room_id: room_id.clone(),
                    author: author.clone(),
                    channel: *channel,
                    body: body.clone(),
                    created_at: *created_at,
                };
                self.state.next_seq = seq + 1;
                if let Some(p) = public_seq {
                    self.state.next_public_seq = p + 1;
                }
                match (&message.author, message.channel) {
                    (Author::System, _) => {
                        self.state.human_turns_since_last_ai = 0;
                        self.state.last_intervention_seq = message.id;
                    }
                    (Author::Participant(_), Channel::Public) => {
                        self.state.human_turns_since_last_ai += 1;
                    }
                    (Author::Participant(sender), Channel::DirectToAi) => {
                        let dissent_id = DissentId(self.dissents.len() as u64 + 1);
                        self.dissents.push(DissentRecord {
                            dissent_id,
                            room_id: room_id.clone(),
                            source_message_id: message.id,
                            sender: sender.clone(),
                            body: message.body.clone(),
                            is_used: false,
                            created_at: message.created_at,
                        });
                    }
                }
                self.messages.push(message);
            }
            LogRecord::DissentMarkUsed { dissent_id, .. } => {
                if let Some(d) = self.dissents.iter_mut().find(|d| d.dissent_id == *dissent_id) {
                    d.is_used = true;
                }
            }
            LogRecord::InterventionOutcome { outcome, .. } => {
                self.state.human_turns_since_last_ai = 0;
                self.state.last_intervention_seq = self.state.next_seq - 1;
                self.outcomes.push(outcome.clone());
            }
        }
    }
}

struct Journal {
    file: Option<File>,
    retained: Option<Vec<LogRecord>>,
}

impl Journal {
    fn write(&mut self, record: &LogRecord) -> Result<()> {
        if let Some(file) = self.file.as_mut() {
            let mut line = record.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        if let Some(retained) = self.retained.as_mut() {
            retained.push(record.clone());
        }
        Ok(())
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

pub struct Store {
    rooms: RwLock<HashMap<RoomId, Arc<Mutex<RoomEntry>>>>,
    journal: Mutex<Journal>,
    clock: Arc<dyn Clock>,
    path: Option<PathBuf>,
}

impl Store {
    /// Store with no durable journal; records are retained in memory.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            rooms: RwLock::new(HashMap::new()),
            journal: Mutex::new(Journal { file: None, retained: Some(Vec::new()) }),
            clock,
            path: None,
        }
    }

    /// Opens (or creates) a journal file, replaying any existing records.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let store = Self {
            rooms: RwLock::new(HashMap::new()),
            journal: Mutex::new(Journal { file: None, retained: None }),
            clock,
            path: Some(path.clone()),
        };
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: LogRecord = serde_json::from_str(&line)
                    .map_err(|e| StoreError::Corrupt { line: idx + 1, reason: e.to_string() })?;
                store
                    .replay_record(&record)
                    .map_err(|e| StoreError::Corrupt { line: idx + 1, reason: e.to_string() })?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        lock(&store.journal).file = Some(file);
        Ok(store)
    }

    pub fn with_system_clock() -> Self {
        Self::in_memory(Arc::new(SystemClock))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn replay_record(&self, record: &LogRecord) -> Result<()> {
        if let LogRecord::RoomCreated { room_id, config, .. } = record {
            let mut rooms = self.rooms.write().unwrap_or_else(|p| p.into_inner());
            if rooms.contains_key(room_id) {
                return Err(StoreError::RoomExists(room_id.clone()));
            }
            rooms.insert(room_id.clone(), Arc::new(Mutex::new(RoomEntry::new(room_id.clone(), config.clone()))));
            return Ok(());
        }
        let room = self.room(record.room_id())?;
        lock(&room).apply(record);
        Ok(())
    }

    /// Every record written so far. Empty for file-backed stores.
    pub fn records(&self) -> Vec<LogRecord> {
        lock(&self.journal).retained.clone().unwrap_or_default()
    }

    fn room(&self, room_id: &RoomId) -> Result<Arc<Mutex<RoomEntry>>> {
        self.rooms
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(room_id)
            .cloned()
            .ok_or_else(|| StoreError::RoomNotFound(room_id.clone()))
    }

    fn commit(&self, entry: &mut RoomEntry, record: LogRecord) -> Result<()> {
        lock(&self.journal).write(&record)?;
        entry.apply(&record);
        Ok(())
    }

    pub fn create_room(&self, room_id: RoomId, config: MediationConfig) -> Result<()> {
        config.validate()?;
        let mut rooms = self.rooms.write().unwrap_or_else(|p| p.into_inner());
        if rooms.contains_key(&room_id) {
            return Err(StoreError::RoomExists(room_id));
        }
        let record =
            LogRecord::RoomCreated { room_id: room_id.clone(), config: config.clone(), created_at: self.clock.now() };
        lock(&self.journal).write(&record)?;
        rooms.insert(room_id.clone(), Arc::new(Mutex::new(RoomEntry::new(room_id, config))));
        Ok(())
    }

    /// Creates the room unless it exists. Returns whether it was created.
    pub fn ensure_room(&self, room_id: &RoomId, config: MediationConfig) -> Result<bool> {
        match self.create_room(room_id.clone(), config) {
            Ok(()) => Ok(true),
            Err(StoreError::RoomExists(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub fn has_room(&self, room_id: &RoomId) -> bool {
        self.room(room_id).is_ok()
    }

    pub fn room_ids(&self) -> Vec<RoomId> {
        let mut ids: Vec<_> = self.rooms.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn join(&self, room_id: &RoomId, participant: ParticipantId) -> Result<()> {
        let room = self.room(room_id)?;
        let mut entry = lock(&room);
        if entry.state.participants.contains(&participant) {
            return Err(StoreError::DuplicateParticipant(participant));
        }
        let record =
            LogRecord::ParticipantJoined { room_id: room_id.clone(), participant, created_at: self.clock.now() };
        self.commit(&mut entry, record)
    }

    /// Registers a callback run for every message appended to the room.
    pub fn subscribe(&self, room_id: &RoomId, listener: Listener) -> Result<()> {
        let room = self.room(room_id)?;
        lock(&room).listeners.push(listener);
        Ok(())
    }

    pub fn append_message(&self, room_id: &RoomId, author: Author, channel: Channel, body: &str) -> Result<Message> {
        if body.trim().is_empty() {
            return Err(StoreError::EmptyBody);
        }
        let room = self.room(room_id)?;
        let mut entry = lock(&room);
        self.append_locked(&mut entry, author, channel, body)
    }

    fn append_locked(&self, entry: &mut RoomEntry, author: Author, channel: Channel, body: &str) -> Result<Message> {
        match &author {
            Author::System if channel == Channel::DirectToAi => return Err(StoreError::SystemDirectMessage),
            Author::Participant(p) if !entry.state.participants.contains(p) => {
                return Err(StoreError::UnknownParticipant(p.clone()))
            }
            _ => {}
        }
        let public_seq = (channel == Channel::Public).then_some(entry.state.next_public_seq);
        let message = Message {
            id: entry.state.next_seq,
            public_seq,
            room_id: entry.state.room_id.clone(),
            author,
            channel,
            body: body.to_string(),
            created_at: self.clock.now(),
        };
        self.commit(entry, LogRecord::from_message(&message))?;
        for listener in &entry.listeners {
            listener(&message);
        }
        Ok(message)
    }

    /// Takes the oldest unused dissent, marking it used in the same step.
    pub fn dequeue_unused_dissent(&self, room_id: &RoomId) -> Result<Option<DissentRecord>> {
        let room = self.room(room_id)?;
        let mut entry = lock(&room);
        let Some(found) = entry.dissents.iter().find(|d| !d.is_used).cloned() else {
            return Ok(None);
        };
        let record = LogRecord::DissentMarkUsed {
            seq: found.source_message_id,
            room_id: room_id.clone(),
            dissent_id: found.dissent_id,
            created_at: self.clock.now(),
        };
        self.commit(&mut entry, record)?;
        Ok(Some(DissentRecord { is_used: true, ..found }))
    }

    /// The `n` most recent public messages, oldest first.
    pub fn list_public_window(&self, room_id: &RoomId, n: usize) -> Result<Vec<Message>> {
        if n == 0 {
            return Err(StoreError::EmptyWindow);
        }
        let room = self.room(room_id)?;
        let entry = lock(&room);
        let mut window: Vec<Message> =
            entry.messages.iter().rev().filter(|m| m.channel == Channel::Public).take(n).cloned().collect();
        window.reverse();
        Ok(window)
    }

    pub fn list_ai_messages(&self, room_id: &RoomId) -> Result<Vec<Message>> {
        let room = self.room(room_id)?;
        let entry = lock(&room);
        Ok(entry.messages.iter().filter(|m| m.author.is_system()).cloned().collect())
    }

    /// Public timeline plus the viewer's own direct messages.
    pub fn messages_visible_to(&self, room_id: &RoomId, viewer: &ParticipantId) -> Result<Vec<Message>> {
        let room = self.room(room_id)?;
        let entry = lock(&room);
        Ok(entry
            .messages
            .iter()
            .filter(|m| m.channel == Channel::Public || m.author.participant() == Some(viewer))
            .cloned()
            .collect())
    }

    /// Full log including every direct message. For the mediation pipeline
    /// and operator tooling only.
    pub fn system_messages_view(&self, room_id: &RoomId) -> Result<Vec<Message>> {
        let room = self.room(room_id)?;
        let entry = lock(&room);
        Ok(entry.messages.clone())
    }

    pub fn dissents(&self, room_id: &RoomId) -> Result<Vec<DissentRecord>> {
        let room = self.room(room_id)?;
        let entry = lock(&room);
        Ok(entry.dissents.clone())
    }

    pub fn outcomes(&self, room_id: &RoomId) -> Result<Vec<InterventionOutcome>> {
        let room = self.room(room_id)?;
        let entry = lock(&room);
        Ok(entry.outcomes.clone())
    }

    pub fn room_state(&self, room_id: &RoomId) -> Result<RoomState> {
        let room = self.room(room_id)?;
        let entry = lock(&room);
        Ok(entry.state.clone())
    }

    /// Ends an intervention: optionally posts the advocate's message, then
    /// records the outcome built from it. Both happen under one room lock, so
    /// no human turn can slip in between the post and the counter reset.
    pub fn conclude_intervention(
        &self,
        room_id: &RoomId,
        body: Option<&str>,
        build: impl FnOnce(Option<&Message>) -> InterventionOutcome,
    ) -> Result<(Option<Message>, InterventionOutcome)> {
        let room = self.room(room_id)?;
        let mut entry = lock(&room);
        let posted = match body {
            Some(b) if b.trim().is_empty() => return Err(StoreError::EmptyBody),
            Some(b) => Some(self.append_locked(&mut entry, Author::System, Channel::Public, b)?),
            None => None,
        };
        let outcome = build(posted.as_ref());
        let record = LogRecord::InterventionOutcome {
            room_id: room_id.clone(),
            outcome: outcome.clone(),
            created_at: self.clock.now(),
        };
        self.commit(&mut entry, record)?;
        Ok((posted, outcome))
    }
}
