//! Turn-count intervention policy and the pipeline that decides between voicing
//! a queued dissent, arguing against the consensus, or staying silent.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::agents::{AgentError, Agents, AiCandidateMessage, IdentityGuard, OpinionSummary};
use crate::model::{InterventionOutcome, Message, OutcomeKind, RoomId, SuppressionReason};
use crate::store::{Store, StoreError};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("an intervention is already running in room {0}")]
    AlreadyInFlight(RoomId),
    #[error("room {0} has no public messages to respond to")]
    NothingToSummarize(RoomId),
}

pub struct Mediator {
    store: Arc<Store>,
    agents: Agents,
    in_flight: Mutex<HashSet<RoomId>>,
}

/// Marks a room as busy until dropped.
struct Flight<'a> {
    in_flight: &'a Mutex<HashSet<RoomId>>,
    room: RoomId,
}

impl Drop for Flight<'_> {
    fn drop(&mut self) {
        self.in_flight.lock().unwrap_or_else(|p| p.into_inner()).remove(&self.room);
    }
}

fn suppression_for(err: &AgentError) -> SuppressionReason {
    match err {
        AgentError::IdentityLeak { .. } => SuppressionReason::IdentityLeak,
        AgentError::StructureViolation => SuppressionReason::MalformedOutput,
        _ => SuppressionReason::ProviderFailure,
    }
}

enum Path {
    Dissent(crate::model::DissentRecord),
    Counter,
}

impl Mediator {
    pub fn new(store: Arc<Store>, agents: Agents) -> Self {
        Self { store, agents, in_flight: Mutex::new(HashSet::new()) }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn agents(&self) -> &Agents {
        &self.agents
    }

    fn try_fly(&self, room: &RoomId) -> Option<Flight<'_>> {
        let mut set = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        set.insert(room.clone()).then(|| Flight { in_flight: &self.in_flight, room: room.clone() })
    }

    pub fn is_in_flight(&self, room: &RoomId) -> bool {
        self.in_flight.lock().unwrap_or_else(|p| p.into_inner()).contains(room)
    }

    pub fn should_intervene(&self, room: &RoomId) -> Result<bool, SchedulerError> {
        let state = self.store.room_state(room)?;
        Ok(state.human_turns_since_last_ai >= state.config.turns_per_intervention && !self.is_in_flight(room))
    }

    /// Hook for the room's mutation path, called right after a public human
    /// message is appended.
    pub fn on_public_human_message(&self, room: &RoomId) -> Result<Option<InterventionOutcome>, SchedulerError> {
        let state = self.store.room_state(room)?;
        if state.human_turns_since_last_ai < state.config.turns_per_intervention {
            return Ok(None);
        }
        let Some(flight) = self.try_fly(room) else {
            return Ok(None);
        };
        self.intervene(room, flight).map(Some)
    }

    /// Runs the pipeline once. Provider trouble never surfaces as an error;
    /// it becomes a suppressed outcome.
    pub fn run_intervention(&self, room: &RoomId) -> Result<InterventionOutcome, SchedulerError> {
        let flight = self.try_fly(room).ok_or_else(|| SchedulerError::AlreadyInFlight(room.clone()))?;
        self.intervene(room, flight)
    }

    /// Public human messages since the previous intervention, capped at the
    /// configured window. Falls back to the plain window when nothing new has
    /// been said.
    fn consensus_window(&self, room: &RoomId) -> Result<Vec<Message>, SchedulerError> {
        let state = self.store.room_state(room)?;
        let window = self.store.list_public_window(room, state.config.summary_window)?;
        let fresh: Vec<Message> =
            window.iter().filter(|m| m.is_public_human() && m.id > state.last_intervention_seq).cloned().collect();
        if !fresh.is_empty() {
            return Ok(fresh);
        }
        let human: Vec<Message> = window.into_iter().filter(Message::is_public_human).collect();
        if human.is_empty() {
            return Err(SchedulerError::NothingToSummarize(room.clone()));
        }
        Ok(human)
    }

    fn intervene(&self, room: &RoomId, _flight: Flight<'_>) -> Result<InterventionOutcome, SchedulerError> {
        let state = self.store.room_state(room)?;
        let config = state.config.clone();
        let window = self.consensus_window(room)?;
        let guard = IdentityGuard::new(&state.participants)
            .with_dissents(self.store.dissents(room)?.into_iter().map(|d| d.dissent_id));

        let path = match self.store.dequeue_unused_dissent(room)? {
            Some(record) => Path::Dissent(record),
            None => Path::Counter,
        };

        let suppress = |reason, attempts_used| {
            self.store
                .conclude_intervention(room, None, |_| InterventionOutcome {
                    kind: OutcomeKind::Suppressed { reason },
                    attempts_used,
                })
                .map(|(_, outcome)| outcome)
                .map_err(SchedulerError::from)
        };

        let summary = match self.agents.summarize(&window, &guard) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(room = %room, error = %e, "summary failed");
                return suppress(suppression_for(&e), 1);
            }
        };

        let max_attempts = 1 + config.max_regeneration_attempts;
        for attempt in 1..=max_attempts {
            let candidate = match self.candidate(&path, &summary, &guard) {
                Ok(c) => c,
                Err(e) => {
                    tracing::warn!(room = %room, attempt, error = %e, "candidate generation failed");
                    return suppress(suppression_for(&e), attempt);
                }
            };
            let prior = self.store.list_ai_messages(room)?;
            let verdict = match self.agents.check_duplicate(&candidate, &prior, config.similarity_threshold) {
                Ok(v) => v,
                Err(e) => {
                    tracing::warn!(room = %room, attempt, error = %e, "duplicate check failed");
                    return suppress(SuppressionReason::ProviderFailure, attempt);
                }
            };
            if verdict.is_duplicate {
                tracing::debug!(room = %room, attempt, similarity = ?verdict.max_similarity, "candidate repeats an earlier message");
                continue;
            }
            let (_, outcome) = self.store.conclude_intervention(room, Some(&candidate.body), |posted| {
                let message_id = posted.expect("a body was posted").id;
                let kind = match &path {
                    Path::Dissent(record) => {
                        OutcomeKind::ParaphrasedDissent { dissent_id: record.dissent_id, message_id }
                    }
                    Path::Counter => {
                        OutcomeKind::GeneratedCounterargument { message_id, covered_range: summary.covered_range }
                    }
                };
                InterventionOutcome { kind, attempts_used: attempt }
            })?;
            tracing::info!(room = %room, outcome = ?outcome.kind, "advocate intervened");
            return Ok(outcome);
        }
        suppress(SuppressionReason::Duplicate, max_attempts)
    }

    fn candidate(
        &self,
        path: &Path,
        summary: &OpinionSummary,
        guard: &IdentityGuard,
    ) -> Result<AiCandidateMessage, AgentError> {
        match path {
            Path::Dissent(record) => self.agents.paraphrase_dissent(record, summary, guard),
            Path::Counter => self.agents.generate_counterargument(summary, guard),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::mpsc;
    use std::thread;

    use super::*;
    use crate::clock::StepClock;
    use crate::gateway::{Backend, BackendError, Gateway, MockBackend, RenderedRequest, ScriptedBackend};
    use crate::model::{Author, Channel, DissentId, MediationConfig, ParticipantId};
    use crate::template::TemplateSet;

    fn setup(backend: Arc<dyn Backend>, config: MediationConfig) -> (Arc<Mediator>, RoomId) {
        let store = Arc::new(Store::in_memory(Arc::new(StepClock::default())));
        let room = RoomId::new("room").unwrap();
        store.create_room(room.clone(), config).unwrap();
        for p in ["ana_1", "ben_2", "cho_3"] {
            store.join(&room, ParticipantId::new(p).unwrap()).unwrap();
        }
        let gateway = Gateway::new(backend, TemplateSet::builtin(), 1);
        (Arc::new(Mediator::new(store, Agents::new(Arc::new(gateway)))), room)
    }

    fn mock() -> (Arc<Mediator>, RoomId) {
        setup(Arc::new(MockBackend::default()), MediationConfig::default())
    }

    fn say(m: &Mediator, room: &RoomId, who: &str, body: &str) -> Option<InterventionOutcome> {
        let author = Author::Participant(ParticipantId::new(who).unwrap());
        m.store().append_message(room, author, Channel::Public, body).unwrap();
        m.on_public_human_message(room).unwrap()
    }

    fn dm(m: &Mediator, room: &RoomId, who: &str, body: &str) {
        let author = Author::Participant(ParticipantId::new(who).unwrap());
        m.store().append_message(room, author, Channel::DirectToAi, body).unwrap();
    }

    #[test]
    fn should_intervene_threshold() {
        let (m, room) = mock();
        assert!(!m.should_intervene(&room).unwrap());
        for i in 0..7 {
            m.store()
                .append_message(
                    &room,
                    Author::Participant(ParticipantId::new("ana_1").unwrap()),
                    Channel::Public,
                    &format!("t{i}"),
                )
                .unwrap();
        }
        assert!(!m.should_intervene(&room).unwrap());
        m.store()
            .append_message(&room, Author::Participant(ParticipantId::new("ben_2").unwrap()), Channel::Public, "t7")
            .unwrap();
        assert!(m.should_intervene(&room).unwrap());
    }

    #[test]
    fn fifth_turn_does_nothing_eighth_fires() {
        let (m, room) = mock();
        for i in 1..=7 {
            assert_eq!(say(&m, &room, "ana_1", &format!("point {i}")), None, "turn {i}");
        }
        let outcome = say(&m, &room, "ben_2", "point 8").expect("eighth turn fires");
        assert!(matches!(outcome.kind, OutcomeKind::GeneratedCounterargument { .. }));
        assert_eq!(m.store().room_state(&room).unwrap().human_turns_since_last_ai, 0);
    }

    #[test]
    fn queued_dissent_takes_priority_and_is_consumed() {
        let (m, room) = mock();
        for i in 1..=7 {
            say(&m, &room, "ana_1", &format!("A is best {i}"));
        }
        dm(&m, &room, "cho_3", "B mentors juniors well");
        let outcome = say(&m, &room, "ben_2", "agreed on A").unwrap();
        let OutcomeKind::ParaphrasedDissent { dissent_id, message_id } = outcome.kind else {
            panic!("expected paraphrase, got {outcome:?}");
        };
        assert_eq!(dissent_id, DissentId(1));
        let ai = m.store().list_ai_messages(&room).unwrap();
        assert_eq!(ai.len(), 1);
        assert_eq!(ai[0].id, message_id);
        assert_eq!(ai[0].body, "PARA[B mentors juniors well]");
        assert!(m.store().dissents(&room).unwrap()[0].is_used);
    }

    #[test]
    fn fixed_provider_is_suppressed_as_duplicate_on_second_round() {
        let (m, room) =
            setup(Arc::new(ScriptedBackend::fixed("Is A really the best choice?")), MediationConfig::default());
        let mut outcomes = Vec::new();
        for i in 1..=16 {
            outcomes.extend(say(&m, &room, "ana_1", &format!("turn {i}")));
        }
        assert_eq!(outcomes.len(), 2);
        assert!(matches!(outcomes[0].kind, OutcomeKind::GeneratedCounterargument { .. }));
        assert_eq!(
            outcomes[1],
            InterventionOutcome {
                kind: OutcomeKind::Suppressed { reason: SuppressionReason::Duplicate },
                attempts_used: 3
            }
        );
        assert_eq!(m.store().list_ai_messages(&room).unwrap().len(), 1);
        assert_eq!(m.store().room_state(&room).unwrap().human_turns_since_last_ai, 0);
    }

    #[test]
    fn provider_failure_is_suppressed_and_resets() {
        let (m, room) = setup(
            Arc::new(ScriptedBackend::failing(BackendError::Transport("refused".into()))),
            MediationConfig::default(),
        );
        let mut last = None;
        for i in 1..=8 {
            last = say(&m, &room, "ana_1", &format!("turn {i}"));
        }
        let outcome = last.unwrap();
        assert_eq!(outcome.kind, OutcomeKind::Suppressed { reason: SuppressionReason::ProviderFailure });
        assert!(m.store().list_ai_messages(&room).unwrap().is_empty());
        assert_eq!(say(&m, &room, "ana_1", "again"), None);
    }

    #[test]
    fn dissent_naming_its_sender_is_redacted() {
        let (m, room) = mock();
        dm(&m, &room, "cho_3", "cho_3 here: B is better");
        let mut last = None;
        for i in 1..=8 {
            last = say(&m, &room, "ana_1", &format!("turn {i}"));
        }
        assert!(matches!(last.unwrap().kind, OutcomeKind::ParaphrasedDissent { .. }));
        let posted = m.store().list_ai_messages(&room).unwrap();
        assert_eq!(posted[0].body, "PARA[[…] here: B is better]");
    }

    #[test]
    fn direct_run_while_busy_is_rejected() {
        let (m, room) = mock();
        let _flight = m.try_fly(&room).unwrap();
        assert!(matches!(m.run_intervention(&room), Err(SchedulerError::AlreadyInFlight(_))));
    }

    #[test]
    fn empty_room_has_nothing_to_summarize() {
        let (m, room) = mock();
        assert!(matches!(m.run_intervention(&room), Err(SchedulerError::NothingToSummarize(_))));
        assert!(!m.is_in_flight(&room));
    }

    /// Blocks every completion until released, so a test can hold an
    /// intervention open.
    struct GatedBackend {
        entered: Mutex<mpsc::Sender<()>>,
        release: Mutex<mpsc::Receiver<()>>,
        inner: MockBackend,
    }

    impl Backend for GatedBackend {
        fn complete(&self, request: &RenderedRequest<'_>) -> Result<String, BackendError> {
            self.entered.lock().unwrap().send(()).ok();
            self.release.lock().unwrap().recv().ok();
            self.inner.complete(request)
        }

        fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
            self.inner.embed(text)
        }
    }

    #[test]
    fn turns_during_an_intervention_do_not_start_another() {
        let (entered_tx, entered_rx) = mpsc::channel();
        let (release_tx, release_rx) = mpsc::channel();
        let backend = GatedBackend {
            entered: Mutex::new(entered_tx),
            release: Mutex::new(release_rx),
            inner: MockBackend::default(),
        };
        let (m, room) = setup(Arc::new(backend), MediationConfig::default());
        for i in 1..=7 {
            say(&m, &room, "ana_1", &format!("turn {i}"));
        }
        let worker = {
            let m = m.clone();
            let room = room.clone();
            thread::spawn(move || say(&m, &room, "ben_2", "turn 8"))
        };
        entered_rx.recv().unwrap();
        assert!(m.is_in_flight(&room));
        assert!(!m.should_intervene(&room).unwrap());
        for i in 9..=17 {
            assert_eq!(say(&m, &room, "cho_3", &format!("turn {i}")), None);
        }
        // Summary, then counterargument.
        release_tx.send(()).unwrap();
        release_tx.send(()).unwrap();
        let outcome = worker.join().unwrap().unwrap();
        assert!(matches!(outcome.kind, OutcomeKind::GeneratedCounterargument { .. }));
        assert!(!m.is_in_flight(&room));
        assert_eq!(m.store().list_ai_messages(&room).unwrap().len(), 1);
    }
}
