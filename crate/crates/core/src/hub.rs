//! Transport-independent room routing.
//!
//! A transport calls [`Hub::connect`] per client, feeds every received frame
//! to [`Hub::handle_raw`], and writes whatever arrives on the returned
//! [`Connection`]'s receiver. Fan-out happens inside the store's append path,
//! so every client sees timeline frames in the room's own order.
//!
//! Lock order: hub state, then store room, then room fan-out.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use tokio::sync::mpsc;

use crate::model::{Author, Channel, MediationConfig, Message, ParticipantId, RoomId, ADVOCATE_NAME};
use crate::protocol::{AckKind, ClientFrame, ErrorCode, ServerFrame};
use crate::scheduler::Mediator;
use crate::store::StoreError;

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct HubConfig {
    pub mediation: MediationConfig,
    pub auto_create_rooms: bool,
    pub outbound_capacity: usize,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self { mediation: MediationConfig::default(), auto_create_rooms: true, outbound_capacity: 256 }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Sending half of a connection's bounded outbound queue.
pub struct Outbox {
    tx: Mutex<Option<mpsc::Sender<ServerFrame>>>,
    overflowed: AtomicBool,
}

impl Outbox {
    /// Queues a frame. A full queue closes the connection: the sender is
    /// dropped so the transport drains what is queued and then sees the end
    /// of the stream.
    fn push(&self, frame: ServerFrame) -> bool {
        let mut tx = lock(&self.tx);
        let Some(sender) = tx.as_ref() else { return false };
        match sender.try_send(frame) {
            Ok(()) => true,
            Err(mpsc::error::TrySendError::Full(_)) => {
                self.overflowed.store(true, Ordering::SeqCst);
                *tx = None;
                false
            }
            Err(mpsc::error::TrySendError::Closed(_)) => {
                *tx = None;
                false
            }
        }
    }

    fn close(&self) {
        *lock(&self.tx) = None;
    }

    pub fn overflowed(&self) -> bool {
        self.overflowed.load(Ordering::SeqCst)
    }
}

/// Receiving side handed to the transport.
pub struct Connection {
    pub id: ConnId,
    pub frames: mpsc::Receiver<ServerFrame>,
    pub outbox: Arc<Outbox>,
}

impl Connection {
    /// Everything queued so far, without waiting.
    pub fn drain(&mut self) -> Vec<ServerFrame> {
        let mut out = Vec::new();
        while let Ok(f) = self.frames.try_recv() {
            out.push(f);
        }
        out
    }
}

struct FanoutInner {
    subscribers: Vec<(ConnId, Arc<Outbox>)>,
    last_public_seq: u64,
}

struct Fanout {
    inner: Mutex<FanoutInner>,
}

impl Fanout {
    fn deliver(&self, message: &Message) {
        let Some(seq) = message.public_seq else { return };
        let frame = match &message.author {
            Author::System => ServerFrame::AiMessage {
                room_id: message.room_id.to_string(),
                seq,
                author: ADVOCATE_NAME.to_string(),
                body: message.body.clone(),
            },
            Author::Participant(p) => ServerFrame::Broadcast {
                room_id: message.room_id.to_string(),
                seq,
                sender: p.to_string(),
                body: message.body.clone(),
            },
        };
        let mut inner = lock(&self.inner);
        inner.last_public_seq = inner.last_public_seq.max(seq);
        inner.subscribers.retain(|(_, outbox)| outbox.push(frame.clone()));
    }
}

struct ConnState {
    outbox: Arc<Outbox>,
    joined: Option<(RoomId, ParticipantId)>,
}

#[derive(Default)]
struct HubState {
    next_conn: ConnId,
    conns: HashMap<ConnId, ConnState>,
    rooms: HashMap<RoomId, Arc<Fanout>>,
}

pub struct Hub {
    mediator: Arc<Mediator>,
    config: HubConfig,
    state: Mutex<HubState>,
}

impl Hub {
    pub fn new(mediator: Arc<Mediator>, config: HubConfig) -> Self {
        Self { mediator, config, state: Mutex::new(HubState::default()) }
    }

    pub fn mediator(&self) -> &Arc<Mediator> {
        &self.mediator
    }

    pub fn connect(&self) -> Connection {
        let (tx, rx) = mpsc::channel(self.config.outbound_capacity.max(1));
        let outbox = Arc::new(Outbox { tx: Mutex::new(Some(tx)), overflowed: AtomicBool::new(false) });
        let mut state = lock(&self.state);
        state.next_conn += 1;
        let id = state.next_conn;
        state.conns.insert(id, ConnState { outbox: outbox.clone(), joined: None });
        Connection { id, frames: rx, outbox }
    }

    /// Forgets the connection. The participant stays registered in the room
    /// and may join again from a new connection.
    pub fn disconnect(&self, conn: ConnId) {
        let mut state = lock(&self.state);
        if let Some(c) = state.conns.remove(&conn) {
            c.outbox.close();
            if let Some((room, _)) = c.joined {
                if let Some(f) = state.rooms.get(&room) {
                    lock(&f.inner).subscribers.retain(|(id, _)| *id != conn);
                }
            }
        }
    }

    fn reply(&self, conn: ConnId, frame: ServerFrame) {
        let outbox = lock(&self.state).conns.get(&conn).map(|c| c.outbox.clone());
        if let Some(o) = outbox {
            o.push(frame);
        }
    }

    fn fail(&self, conn: ConnId, code: ErrorCode, message: impl Into<String>) {
        self.reply(conn, ServerFrame::error(code, message));
    }

    /// Parses and handles one raw frame. Malformed input is answered with an
    /// error frame; the connection stays usable.
    pub fn handle_raw(&self, conn: ConnId, raw: &str) {
        match serde_json::from_str::<ClientFrame>(raw) {
            Ok(frame) => self.handle(conn, frame),
            Err(e) => self.fail(conn, ErrorCode::MalformedFrame, e.to_string()),
        }
    }

    pub fn handle(&self, conn: ConnId, frame: ClientFrame) {
        match frame {
            ClientFrame::Join { room_id, sender } => self.handle_join(conn, &room_id, &sender),
            ClientFrame::PostPublic { room_id, sender, body } => {
                self.handle_post(conn, &room_id, &sender, &body, Channel::Public)
            }
            ClientFrame::PostDm { room_id, sender, body } => {
                self.handle_post(conn, &room_id, &sender, &body, Channel::DirectToAi)
            }
            ClientFrame::Pong {} => {}
        }
    }

    fn fanout_for(&self, state: &mut HubState, room: &RoomId) -> Result<Arc<Fanout>, StoreError> {
        if let Some(f) = state.rooms.get(room) {
            return Ok(f.clone());
        }
        let store = self.mediator.store();
        let fanout =
            Arc::new(Fanout { inner: Mutex::new(FanoutInner { subscribers: Vec::new(), last_public_seq: 0 }) });
        let listener = fanout.clone();
        store.subscribe(room, Box::new(move |m: &Message| listener.deliver(m)))?;
        let watermark = store.room_state(room)?.next_public_seq - 1;
        {
            let mut inner = lock(&fanout.inner);
            inner.last_public_seq = inner.last_public_seq.max(watermark);
        }
        state.rooms.insert(room.clone(), fanout.clone());
        Ok(fanout)
    }

    pub fn handle_join(&self, conn: ConnId, room_id: &str, sender: &str) {
        let (room, participant) = match (RoomId::new(room_id), ParticipantId::new(sender)) {
            (Ok(r), Ok(p)) => (r, p),
            (Err(e), _) | (_, Err(e)) => return self.fail(conn, ErrorCode::InvalidId, e.to_string()),
        };
        let store = self.mediator.store().clone();
        let mut state = lock(&self.state);
        let Some(outbox) = state.conns.get(&conn).map(|c| c.outbox.clone()) else { return };
        let reject = |code, msg: String| {
            outbox.push(ServerFrame::error(code, msg));
        };
        if state.conns[&conn].joined.is_some() {
            return reject(ErrorCode::AlreadyJoined, "connection already joined a room".into());
        }
        if !store.has_room(&room) {
            if !self.config.auto_create_rooms {
                return reject(ErrorCode::UnknownRoom, format!("room {room} does not exist"));
            }
            if let Err(e) = store.ensure_room(&room, self.config.mediation.clone()) {
                return reject(ErrorCode::Internal, e.to_string());
            }
        }
        let active = state.conns.values().any(|c| c.joined.as_ref() == Some(&(room.clone(), participant.clone())));
        if active {
            return reject(ErrorCode::DuplicateParticipantId, format!("{participant} is already connected"));
        }
        let registered = match store.room_state(&room) {
            Ok(s) => s.participants.contains(&participant),
            Err(e) => return reject(ErrorCode::Internal, e.to_string()),
        };
        if !registered {
            if let Err(e) = store.join(&room, participant.clone()) {
                return reject(ErrorCode::Internal, e.to_string());
            }
        }
        let fanout = match self.fanout_for(&mut state, &room) {
            Ok(f) => f,
            Err(e) => return reject(ErrorCode::Internal, e.to_string()),
        };
        if let Some(c) = state.conns.get_mut(&conn) {
            c.joined = Some((room.clone(), participant));
        }
        // Subscribe and ack under the fan-out lock so no timeline frame can
        // land between the watermark and the subscription.
        let mut inner = lock(&fanout.inner);
        inner.subscribers.push((conn, outbox.clone()));
        outbox.push(ServerFrame::Ack {
            room_id: room.to_string(),
            of: AckKind::Join,
            seq: Some(inner.last_public_seq),
        });
    }

    fn joined_as(&self, conn: ConnId, room_id: &str, sender: &str) -> Option<(RoomId, ParticipantId)> {
        let state = lock(&self.state);
        let (room, participant) = state.conns.get(&conn)?.joined.clone()?;
        (room.as_str() == room_id && participant.as_str() == sender).then_some((room, participant))
    }

    fn handle_post(&self, conn: ConnId, room_id: &str, sender: &str, body: &str, channel: Channel) {
        let Some((room, participant)) = self.joined_as(conn, room_id, sender) else {
            return self.fail(conn, ErrorCode::NotJoined, "join the room as this sender first");
        };
        if body.trim().is_empty() {
            return self.fail(conn, ErrorCode::EmptyBody, "message body is empty");
        }
        let store = self.mediator.store();
        let message = match store.append_message(&room, Author::Participant(participant), channel, body) {
            Ok(m) => m,
            Err(StoreError::EmptyBody) => return self.fail(conn, ErrorCode::EmptyBody, "message body is empty"),
            Err(e) => return self.fail(conn, ErrorCode::Internal, e.to_string()),
        };
        let of = match channel {
            Channel::Public => AckKind::PostPublic,
            Channel::DirectToAi => AckKind::PostDm,
        };
        self.reply(conn, ServerFrame::Ack { room_id: room.to_string(), of, seq: message.public_seq });
        if channel == Channel::Public {
            if let Err(e) = self.mediator.on_public_human_message(&room) {
                tracing::error!(room = %room, error = %e, "intervention hook failed");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Agents;
    use crate::clock::StepClock;
    use crate::gateway::Gateway;
    use crate::store::Store;

    fn hub_with(config: HubConfig) -> Hub {
        let store = Arc::new(Store::in_memory(Arc::new(StepClock::default())));
        let mediator = Arc::new(Mediator::new(store, Agents::new(Arc::new(Gateway::mock()))));
        Hub::new(mediator, config)
    }

    fn hub() -> Hub {
        hub_with(HubConfig::default())
    }

    fn join(hub: &Hub, room: &str, who: &str) -> Connection {
        let mut c = hub.connect();
        hub.handle(c.id, ClientFrame::Join { room_id: room.into(), sender: who.into() });
        let frames = c.drain();
        assert!(matches!(frames.last(), Some(ServerFrame::Ack { of: AckKind::Join, .. })), "{frames:?}");
        c
    }

    fn post(hub: &Hub, c: &Connection, room: &str, who: &str, body: &str) {
        hub.handle(c.id, ClientFrame::PostPublic { room_id: room.into(), sender: who.into(), body: body.into() });
    }

    #[test]
    fn first_join_acks_with_watermark() {
        let hub = hub();
        let mut c = hub.connect();
        hub.handle_raw(c.id, r#"{"type":"join","room_id":"r1","sender":"ana_1"}"#);
        assert_eq!(c.drain(), vec![ServerFrame::Ack { room_id: "r1".into(), of: AckKind::Join, seq: Some(0) }]);
    }

    #[test]
    fn second_join_with_same_id_is_rejected() {
        let hub = hub();
        let _a = join(&hub, "r1", "ana_1");
        let mut b = hub.connect();
        hub.handle(b.id, ClientFrame::Join { room_id: "r1".into(), sender: "ana_1".into() });
        assert!(matches!(b.drain()[..], [ServerFrame::Error { code: ErrorCode::DuplicateParticipantId, .. }]));
    }

    #[test]
    fn rejoin_after_disconnect_is_allowed() {
        let hub = hub();
        let a = join(&hub, "r1", "ana_1");
        hub.disconnect(a.id);
        let _again = join(&hub, "r1", "ana_1");
    }

    #[test]
    fn malformed_frame_keeps_connection_open() {
        let hub = hub();
        let mut c = hub.connect();
        hub.handle_raw(c.id, "{not json");
        assert!(matches!(c.drain()[..], [ServerFrame::Error { code: ErrorCode::MalformedFrame, .. }]));
        hub.handle_raw(c.id, r#"{"type":"join","room_id":"r1","sender":"ana_1"}"#);
        assert!(matches!(c.drain()[..], [ServerFrame::Ack { of: AckKind::Join, .. }]));
    }

    #[test]
    fn invalid_ids_and_unknown_rooms() {
        let hub = hub_with(HubConfig { auto_create_rooms: false, ..HubConfig::default() });
        let mut c = hub.connect();
        hub.handle(c.id, ClientFrame::Join { room_id: "r1".into(), sender: "system".into() });
        hub.handle(c.id, ClientFrame::Join { room_id: "r1".into(), sender: "ana_1".into() });
        let frames = c.drain();
        assert!(matches!(frames[0], ServerFrame::Error { code: ErrorCode::InvalidId, .. }));
        assert!(matches!(frames[1], ServerFrame::Error { code: ErrorCode::UnknownRoom, .. }));
    }

    #[test]
    fn public_post_fans_out_to_everyone_with_same_seq() {
        let hub = hub();
        let mut conns: Vec<_> = ["ana_1", "ben_2", "cho_3"].iter().map(|p| join(&hub, "r1", p)).collect();
        post(&hub, &conns[0], "r1", "ana_1", "A looks strong");
        for c in conns.iter_mut() {
            let broadcasts: Vec<_> =
                c.drain().into_iter().filter(|f| matches!(f, ServerFrame::Broadcast { .. })).collect();
            assert_eq!(
                broadcasts,
                vec![ServerFrame::Broadcast {
                    room_id: "r1".into(),
                    seq: 1,
                    sender: "ana_1".into(),
                    body: "A looks strong".into()
                }]
            );
        }
    }

    #[test]
    fn empty_body_broadcasts_nothing() {
        let hub = hub();
        let mut a = join(&hub, "r1", "ana_1");
        let mut b = join(&hub, "r1", "ben_2");
        post(&hub, &a, "r1", "ana_1", "   ");
        assert!(matches!(a.drain()[..], [ServerFrame::Error { code: ErrorCode::EmptyBody, .. }]));
        assert!(b.drain().is_empty());
    }

    #[test]
    fn posting_before_join_or_as_someone_else_is_rejected() {
        let hub = hub();
        let mut c = hub.connect();
        post(&hub, &c, "r1", "ana_1", "hi");
        assert!(matches!(c.drain()[..], [ServerFrame::Error { code: ErrorCode::NotJoined, .. }]));
        let mut a = join(&hub, "r1", "ana_1");
        post(&hub, &a, "r1", "ben_2", "spoof");
        assert!(matches!(a.drain()[..], [ServerFrame::Error { code: ErrorCode::NotJoined, .. }]));
    }

    #[test]
    fn dm_is_acked_only_to_its_sender() {
        let hub = hub();
        let mut a = join(&hub, "r1", "ana_1");
        let mut b = join(&hub, "r1", "ben_2");
        hub.handle(
            a.id,
            ClientFrame::PostDm { room_id: "r1".into(), sender: "ana_1".into(), body: "B is better".into() },
        );
        assert_eq!(a.drain(), vec![ServerFrame::Ack { room_id: "r1".into(), of: AckKind::PostDm, seq: None }]);
        assert!(b.drain().is_empty());
    }

    #[test]
    fn eighth_post_is_followed_by_an_ai_message() {
        let hub = hub();
        let a = join(&hub, "r1", "ana_1");
        let mut b = join(&hub, "r1", "ben_2");
        hub.handle(
            a.id,
            ClientFrame::PostDm { room_id: "r1".into(), sender: "ana_1".into(), body: "B mentors well".into() },
        );
        for i in 1..=8 {
            post(&hub, &a, "r1", "ana_1", &format!("point {i}"));
        }
        let frames = b.drain();
        assert_eq!(frames.len(), 9);
        assert!(matches!(&frames[7], ServerFrame::Broadcast { seq: 8, .. }));
        assert_eq!(
            frames[8],
            ServerFrame::AiMessage {
                room_id: "r1".into(),
                seq: 9,
                author: "Advocate".into(),
                body: "PARA[B mentors well]".into()
            }
        );
    }

    #[test]
    fn overflowing_queue_closes_the_connection() {
        let hub = hub_with(HubConfig { outbound_capacity: 2, ..HubConfig::default() });
        let a = join(&hub, "r1", "ana_1");
        let mut slow = hub.connect();
        hub.handle(slow.id, ClientFrame::Join { room_id: "r1".into(), sender: "ben_2".into() });
        for i in 0..4 {
            post(&hub, &a, "r1", "ana_1", &format!("m{i}"));
        }
        assert!(slow.outbox.overflowed());
        let queued = slow.drain();
        assert_eq!(queued.len(), 2);
        assert!(slow.frames.try_recv().is_err());
    }
}
