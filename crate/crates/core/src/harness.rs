//! Transcript replay.
//!
//! A script is line-delimited JSON: a header record declaring the room, its
//! participants and optional config overrides, followed by one record per
//! scripted turn.
//!
//! ```text
//! {"type":"header","room_id":"promotion","participants":["ana","ben"],"config":{"turns_per_intervention":8}}
//! {"at":1,"actor":"ana","channel":"public","body":"Candidate A has led two launches."}
//! {"at":2,"actor":"ben","channel":"dm","body":"I think B mentors people better."}
//! ```
//!
//! Replaying drives the store and scheduler on a deterministic clock and
//! returns the resulting event log as a [`RunReport`].

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Agents;
use crate::clock::StepClock;
use crate::gateway::Gateway;
use crate::model::{Author, Channel, ConfigError, InterventionOutcome, MediationConfig, ParticipantId, RoomId};
use crate::protocol::ServerFrame;
use crate::scheduler::{Mediator, SchedulerError};
use crate::store::{LogRecord, Store, StoreError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("script line {line}: {reason}")]
    ScriptParse { line: usize, reason: String },
    #[error("report line {line}: {reason}")]
    ReportParse { line: usize, reason: String },
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Per-field overrides of [`MediationConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediationOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turns_per_intervention: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_regeneration_attempts: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_window: Option<usize>,
}

impl MediationOverrides {
    pub fn apply(&self, mut base: MediationConfig) -> MediationConfig {
        if let Some(v) = self.turns_per_intervention {
            base.turns_per_intervention = v;
        }
        if let Some(v) = self.similarity_threshold {
            base.similarity_threshold = v;
        }
        if let Some(v) = self.max_regeneration_attempts {
            base.max_regeneration_attempts = v;
        }
        if let Some(v) = self.summary_window {
            base.summary_window = v;
        }
        base
    }

    /// Fills fields left unset here from `fallback`.
    pub fn or(self, fallback: Self) -> Self {
        Self {
            turns_per_intervention: self.turns_per_intervention.or(fallback.turns_per_intervention),
            similarity_threshold: self.similarity_threshold.or(fallback.similarity_threshold),
            max_regeneration_attempts: self.max_regeneration_attempts.or(fallback.max_regeneration_attempts),
            summary_window: self.summary_window.or(fallback.summary_window),
        }
    }

    pub fn from_config(config: &MediationConfig) -> Self {
        Self {
            turns_per_intervention: Some(config.turns_per_intervention),
            similarity_threshold: Some(config.similarity_threshold),
            max_regeneration_attempts: Some(config.max_regeneration_attempts),
            summary_window: Some(config.summary_window),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptChannel {
    Public,
    Dm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEvent {
    pub at: u64,
    pub actor: ParticipantId,
    pub channel: ScriptChannel,
    pub body: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum HeaderTag {
    Header,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "type")]
    tag: HeaderTag,
    room_id: RoomId,
    participants: Vec<ParticipantId>,
    #[serde(default)]
    config: MediationOverrides,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub room_id: RoomId,
    pub participants: Vec<ParticipantId>,
    pub overrides: MediationOverrides,
    pub events: Vec<ScriptEvent>,
}

impl Script {
    pub fn new(room_id: RoomId, participants: Vec<ParticipantId>) -> Self {
        Self { room_id, participants, overrides: MediationOverrides::default(), events: Vec::new() }
    }

    /// Appends a turn with the next ordinal.
    pub fn push(&mut self, actor: &ParticipantId, channel: ScriptChannel, body: &str) -> &mut Self {
        let at = self.events.last().map_or(1, |e| e.at + 1);
        self.events.push(ScriptEvent { at, actor: actor.clone(), channel, body: body.to_string() });
        self
    }

    /// Parses a script. Input with no non-blank lines is `Ok(None)`.
    pub fn parse(source: &str) -> Result<Option<Self>, HarnessError> {
        let err = |line: usize, reason: String| HarnessError::ScriptParse { line, reason };
        let mut lines = source.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let Some((header_line, header)) = lines.next() else {
            return Ok(None);
        };
        let header: Header =
            serde_json::from_str(header).map_err(|e| err(header_line, format!("invalid header: {e}")))?;
        let declared: BTreeSet<&ParticipantId> = header.participants.iter().collect();
        if declared.len() != header.participants.len() {
            return Err(err(header_line, "duplicate participant in header".into()));
        }
        header.config.apply(MediationConfig::default()).validate().map_err(|e| err(header_line, e.to_string()))?;
        let mut events: Vec<ScriptEvent> = Vec::new();
        for (line, text) in lines {
            let event: ScriptEvent = serde_json::from_str(text).map_err(|e| err(line, e.to_string()))?;
            if let Some(prev) = events.last() {
                if event.at <= prev.at {
                    return Err(err(line, format!("ordinal {} does not follow {}", event.at, prev.at)));
                }
            }
            if !declared.contains(&event.actor) {
                return Err(err(line, format!("actor {} is not declared in the header", event.actor)));
            }
            if event.body.trim().is_empty() {
                return Err(err(line, "empty body".into()));
            }
            events.push(event);
        }
        Ok(Some(Self { room_id: header.room_id, participants: header.participants, overrides: header.config, events }))
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            tag: HeaderTag::Header,
            room_id: self.room_id.clone(),
            participants: self.participants.clone(),
            config: self.overrides.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds the script that produced a room's event log: the room's
    /// config, its participants, and every human message in order.
    pub fn from_event_log(records: &[LogRecord], room_id: &RoomId) -> Option<Self> {
        let mut script: Option<Script> = None;
        for record in records.iter().filter(|r| r.room_id() == room_id) {
            match record {
                LogRecord::RoomCreated { config, .. } => {
                    let mut s = Script::new(room_id.clone(), Vec::new());
                    s.overrides = MediationOverrides::from_config(config);
                    script = Some(s);
                }
                LogRecord::ParticipantJoined { participant, .. } => {
                    script.as_mut()?.participants.push(participant.clone());
                }
                LogRecord::Message { author: Author::Participant(p), channel, body, .. } => {
                    let channel = match channel {
                        Channel::Public => ScriptChannel::Public,
                        Channel::DirectToAi => ScriptChannel::Dm,
                    };
                    script.as_mut()?.push(p, channel, body);
                }
                _ => {}
            }
        }
        script
    }
}

/// Replay settings. Overrides here win over the script header's.
#[derive(Clone)]
pub struct ReplayOptions {
    pub overrides: MediationOverrides,
    pub gateway: Arc<Gateway>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self { overrides: MediationOverrides::default(), gateway: Arc::new(Gateway::mock()) }
    }
}

/// The event log of one replay, one JSON record per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub records: Vec<LogRecord>,
}

impl RunReport {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn parse(source: &str) -> Result<Self, HarnessError> {
        let records = source
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| HarnessError::ReportParse { line: i + 1, reason: e.to_string() })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn outcomes(&self) -> Vec<InterventionOutcome> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::InterventionOutcome { outcome, .. } => Some(outcome.clone()),
                _ => None,
            })
            .collect()
    }

    /// Advocate messages as `(seq, body)`.
    pub fn ai_messages(&self) -> Vec<(u64, String)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Message { seq, author: Author::System, body, .. } => Some((*seq, body.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn message_count(&self) -> usize {
        self.records.iter().filter(|r| matches!(r, LogRecord::Message { .. })).count()
    }
}

pub fn replay(script: Option<&Script>, options: &ReplayOptions) -> Result<RunReport, HarnessError> {
    let Some(script) = script else {
        return Ok(RunReport::default());
    };
    let config = options.overrides.apply(script.overrides.apply(MediationConfig::default()));
    config.validate()?;
    let store = Arc::new(Store::in_memory(Arc::new(StepClock::default())));
    store.create_room(script.room_id.clone(), config)?;
    for p in &script.participants {
        store.join(&script.room_id, p.clone())?;
    }
    let mediator = Mediator::new(store.clone(), Agents::new(options.gateway.clone()));
    for event in &script.events {
        let channel = match event.channel {
            ScriptChannel::Public => Channel::Public,
            ScriptChannel::Dm => Channel::DirectToAi,
        };
        store.append_message(&script.room_id, Author::Participant(event.actor.clone()), channel, &event.body)?;
        if channel == Channel::Public {
            mediator.on_public_human_message(&script.room_id)?;
        }
    }
    Ok(RunReport { records: store.records() })
}

pub fn replay_file(path: impl AsRef<Path>, options: &ReplayOptions) -> Result<RunReport, HarnessError> {
    let path = path.as_ref();
    let source = std::fs::read_to_string(path)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    replay(Script::parse(&source)?.as_ref(), options)
}

/// Which records take part in a diff.
#[derive(Debug, Clone, PartialEq)]
pub enum ReportView {
    /// Every record, byte for byte.
    Full,
    /// Only what this participant could observe: the public timeline rendered
    /// as the frames they would receive, plus their own direct messages.
    VisibleTo(ParticipantId),
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename = "own_dm")]
struct OwnDm<'a> {
    body: &'a str,
}

fn project(report: &RunReport, view: &ReportView) -> Vec<String> {
    let viewer = match view {
        ReportView::Full => return report.records.iter().map(LogRecord::to_line).collect(),
        ReportView::VisibleTo(p) => p,
    };
    report
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Message { public_seq: Some(seq), room_id, author, channel: Channel::Public, body, .. } => {
                let frame = match author {
                    Author::System => ServerFrame::AiMessage {
                        room_id: room_id.to_string(),
                        seq: *seq,
                        author: crate::model::ADVOCATE_NAME.to_string(),
                        body: body.clone(),
                    },
                    Author::Participant(p) => ServerFrame::Broadcast {
                        room_id: room_id.to_string(),
                        seq: *seq,
                        sender: p.to_string(),
                        body: body.clone(),
                    },
                };
                Some(frame.to_json())
            }
            LogRecord::Message { author: Author::Participant(p), channel: Channel::DirectToAi, body, .. }
                if p == viewer =>
            {
                Some(serde_json::to_string(&OwnDm { body }).expect("serializes"))
            }
            _ => None,
        })
        .collect()
}

/// One position at which two normalized streams differ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordDiff {
    pub index: usize,
    pub left: Option<String>,
    pub right: Option<String>,
}

/// Positional diff of two reports under `view`. Empty exactly when the
/// normalized streams are identical.
pub fn diff_reports(a: &RunReport, b: &RunReport, view: &ReportView) -> Vec<RecordDiff> {
    let (left, right) = (project(a, view), project(b, view));
    (0..left.len().max(right.len()))
        .filter_map(|i| {
            let (l, r) = (left.get(i), right.get(i));
            (l != r).then(|| RecordDiff { index: i, left: l.cloned(), right: r.cloned() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OutcomeKind;

    fn pid(s: &str) -> ParticipantId {
        ParticipantId::new(s).unwrap()
    }

    fn script(turns: usize) -> Script {
        let people = [pid("ana_1"), pid("ben_2"), pid("cho_3")];
        let mut s = Script::new(RoomId::new("promo").unwrap(), people.to_vec());
        for i in 0..turns {
            s.push(&people[i % 3], ScriptChannel::Public, &format!("claim{i} point{i} reason{i}"));
        }
        s
    }

    #[test]
    fn parses_header_and_events() {
        let src = r#"
{"type":"header","room_id":"r","participants":["ana_1","ben_2"],"config":{"turns_per_intervention":4}}
{"at":1,"actor":"ana_1","channel":"public","body":"hello"}
{"at":3,"actor":"ben_2","channel":"dm","body":"psst"}
"#;
        let s = Script::parse(src).unwrap().unwrap();
        assert_eq!(s.events.len(), 2);
        assert_eq!(s.overrides.turns_per_intervention, Some(4));
        assert_eq!(Script::parse(&s.to_jsonl()).unwrap().unwrap(), s);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let header = r#"{"type":"header","room_id":"r","participants":["ana_1"]}"#;
        let cases = [
            (format!("{header}\n{{\"at\":1,\"actor\":\"zed\",\"channel\":\"public\",\"body\":\"x\"}}"), 2),
            (format!("{header}\n{{\"at\":2,\"actor\":\"ana_1\",\"channel\":\"public\",\"body\":\"x\"}}\n{{\"at\":2,\"actor\":\"ana_1\",\"channel\":\"public\",\"body\":\"y\"}}"), 3),
            (format!("{header}\n\nnot json"), 3),
            ("{\"at\":1}".to_string(), 1),
            (format!("{header}\n{{\"at\":1,\"actor\":\"ana_1\",\"channel\":\"public\",\"body\":\" \"}}"), 2),
            (r#"{"type":"header","room_id":"r","participants":["ana_1"],"config":{"similarity_threshold":2.0}}"#.to_string(), 1),
        ];
        for (src, want) in cases {
            match Script::parse(&src) {
                Err(HarnessError::ScriptParse { line, .. }) => assert_eq!(line, want, "{src}"),
                other => panic!("expected parse error for {src}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_script_gives_empty_report() {
        assert_eq!(Script::parse("\n  \n").unwrap(), None);
        let report = replay(None, &ReplayOptions::default()).unwrap();
        assert_eq!(report.message_count(), 0);
        assert_eq!(report.to_jsonl(), "");
    }

    #[test]
    fn sixteen_turns_give_two_counterarguments() {
        let report = replay(Some(&script(16)), &ReplayOptions::default()).unwrap();
        let outcomes = report.outcomes();
        assert_eq!(outcomes.len(), 2, "{outcomes:?}");
        assert!(outcomes.iter().all(|o| matches!(o.kind, OutcomeKind::GeneratedCounterargument { .. })));
    }

    #[test]
    fn dm_before_eighth_turn_is_paraphrased() {
        let mut s = script(7);
        s.push(&pid("cho_3"), ScriptChannel::Dm, "B would mentor the team better");
        s.push(&pid("ana_1"), ScriptChannel::Public, "so A it is");
        let report = replay(Some(&s), &ReplayOptions::default()).unwrap();
        let outcomes = report.outcomes();
        assert_eq!(outcomes.len(), 1);
        assert!(matches!(outcomes[0].kind, OutcomeKind::ParaphrasedDissent { .. }));
        assert_eq!(report.ai_messages()[0].1, "PARA[B would mentor the team better]");
    }

    #[test]
    fn report_round_trips_through_jsonl() {
        let report = replay(Some(&script(9)), &ReplayOptions::default()).unwrap();
        let parsed = RunReport::parse(&report.to_jsonl()).unwrap();
        assert_eq!(parsed, report);
        assert!(matches!(RunReport::parse("{}\n"), Err(HarnessError::ReportParse { line: 1, .. })));
    }

    #[test]
    fn identical_runs_have_no_diff() {
        let a = replay(Some(&script(20)), &ReplayOptions::default()).unwrap();
        let b = replay(Some(&script(20)), &ReplayOptions::default()).unwrap();
        assert!(diff_reports(&a, &b, &ReportView::Full).is_empty());
    }

    #[test]
    fn different_cadence_diverges_at_earlier_intervention() {
        let mut fast = script(12);
        fast.overrides.turns_per_intervention = Some(4);
        let a = replay(Some(&fast), &ReplayOptions::default()).unwrap();
        let b = replay(Some(&script(12)), &ReplayOptions::default()).unwrap();
        let diffs = diff_reports(&a, &b, &ReportView::Full);
        // Records differ first in the room_created config; compare the visible
        // timeline instead, where the first divergence is the advocate's post.
        assert_eq!(diffs[0].index, 0);
        let visible = diff_reports(&a, &b, &ReportView::VisibleTo(pid("ana_1")));
        assert_eq!(visible[0].index, 4);
        assert!(visible[0].left.as_deref().unwrap().contains("\"ai_message\""));
    }

    #[test]
    fn other_peoples_dms_are_invisible() {
        let base = script(5);
        let mut with_dm = script(5);
        with_dm
            .events
            .insert(2, ScriptEvent { at: 0, actor: pid("cho_3"), channel: ScriptChannel::Dm, body: "secret".into() });
        for (i, e) in with_dm.events.iter_mut().enumerate() {
            e.at = i as u64 + 1;
        }
        let a = replay(Some(&base), &ReplayOptions::default()).unwrap();
        let b = replay(Some(&with_dm), &ReplayOptions::default()).unwrap();
        assert!(diff_reports(&a, &b, &ReportView::VisibleTo(pid("ana_1"))).is_empty());
        assert!(!diff_reports(&a, &b, &ReportView::VisibleTo(pid("cho_3"))).is_empty());
    }

    #[test]
    fn event_log_rebuilds_its_script() {
        let mut s = script(10);
        s.push(&pid("ben_2"), ScriptChannel::Dm, "C deserves a look");
        for i in 0..8 {
            s.push(&pid("ana_1"), ScriptChannel::Public, &format!("more on A, part {i}"));
        }
        let first = replay(Some(&s), &ReplayOptions::default()).unwrap();
        let rebuilt = Script::from_event_log(&first.records, &s.room_id).unwrap();
        let second = replay(Some(&rebuilt), &ReplayOptions::default()).unwrap();
        assert_eq!(first.outcomes(), second.outcomes());
        assert_eq!(first.to_jsonl(), second.to_jsonl());
    }
}
