//! Network transports for the discussion hub.
//!
//! Frames are JSON objects. On plain TCP each frame is preceded by a 4-byte
//! big-endian length; on WebSocket each text message is one frame.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use advocate_core::agents::Agents;
use advocate_core::clock::SystemClock;
use advocate_core::config::AppConfig;
use advocate_core::gateway::Gateway;
use advocate_core::hub::{ConnId, Hub, Outbox};
use advocate_core::protocol::{ErrorCode, ServerFrame};
use advocate_core::scheduler::Mediator;
use advocate_core::store::Store;
use advocate_core::template::TemplateSet;
use anyhow::Context;
use bytes::Bytes;
use futures::{Sink, SinkExt, Stream, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::{Error as WsError, Message};
use tokio_util::codec::{Framed, LengthDelimitedCodec};

pub const MAX_FRAME_BYTES: usize = 1 << 20;

pub fn codec() -> LengthDelimitedCodec {
    LengthDelimitedCodec::builder().length_field_length(4).big_endian().max_frame_length(MAX_FRAME_BYTES).new_codec()
}

/// Builds a hub from configuration. With an event log path the store
/// replays that file first and appends to it afterwards.
pub fn build_hub(config: &AppConfig) -> anyhow::Result<Arc<Hub>> {
    let templates = match &config.server.templates_dir {
        Some(dir) => TemplateSet::from_dir(dir).with_context(|| format!("loading templates from {}", dir.display()))?,
        None => TemplateSet::builtin(),
    };
    let gateway = Gateway::from_config(&config.provider, templates)?;
    let clock = Arc::new(SystemClock);
    let store = match &config.server.event_log {
        Some(path) => Store::open(path, clock).with_context(|| format!("opening event log {}", path.display()))?,
        None => Store::in_memory(clock),
    };
    let mediator = Mediator::new(Arc::new(store), Agents::new(Arc::new(gateway)));
    Ok(Arc::new(Hub::new(Arc::new(mediator), config.hub_config())))
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<AppConfig> {
    let mut config = match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    config.provider = config.provider.with_env_overrides();
    Ok(config)
}

/// Accepts length-prefixed TCP connections until the listener fails.
pub async fn serve(listener: TcpListener, hub: Arc<Hub>, ping_interval: Duration) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        tracing::debug!(%peer, "accepted");
        let hub = hub.clone();
        tokio::spawn(async move {
            handle_connection(stream, hub, ping_interval).await;
            tracing::debug!(%peer, "closed");
        });
    }
}

/// Accepts WebSocket connections until the listener fails. Each text
/// message carries one frame.
pub async fn serve_websocket(listener: TcpListener, hub: Arc<Hub>, ping_interval: Duration) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let hub = hub.clone();
        tokio::spawn(async move {
            match tokio_tungstenite::accept_async(stream).await {
                Ok(ws) => {
                    tracing::debug!(%peer, "websocket accepted");
                    let (sink, source) = ws.split();
                    let source = source.filter_map(|m| async move {
                        match m {
                            Ok(Message::Text(t)) => Some(Ok(t.as_str().to_owned())),
                            Ok(Message::Binary(b)) => Some(Ok(String::from_utf8_lossy(&b).into_owned())),
                            Ok(Message::Close(_)) => Some(Err(())),
                            Ok(_) => None,
                            Err(_) => Some(Err(())),
                        }
                    });
                    let sink = sink.with(|s: String| async move { Ok::<_, WsError>(Message::text(s)) });
                    drive(Box::pin(source), Box::pin(sink), hub, ping_interval).await;
                }
                Err(e) => tracing::debug!(%peer, error = %e, "websocket handshake failed"),
            }
        });
    }
}

pub async fn handle_connection(stream: TcpStream, hub: Arc<Hub>, ping_interval: Duration) {
    let _ = stream.set_nodelay(true);
    let (sink, source) = Framed::new(stream, codec()).split();
    let source = source.map(|item| item.map(|b| String::from_utf8_lossy(&b).into_owned()).map_err(|_| ()));
    let sink = sink.with(|s: String| async move { Ok::<_, std::io::Error>(Bytes::from(s)) });
    drive(Box::pin(source), Box::pin(sink), hub, ping_interval).await;
}

/// Runs one connection: inbound frames go to the hub in order, outbound
/// frames and keepalives go to the sink. Ends when either side does.
async fn drive<R, W>(mut source: R, sink: W, hub: Arc<Hub>, ping_interval: Duration)
where
    R: Stream<Item = Result<String, ()>> + Unpin,
    W: Sink<String> + Unpin + Send + 'static,
{
    let conn = hub.connect();
    let id = conn.id;
    let mut writer = tokio::spawn(write_loop(sink, conn.frames, conn.outbox, ping_interval));
    tokio::select! {
        _ = read_loop(&mut source, &hub, id) => {
            hub.disconnect(id);
            let _ = writer.await;
        }
        _ = &mut writer => hub.disconnect(id),
    }
}

async fn read_loop<R>(source: &mut R, hub: &Arc<Hub>, id: ConnId)
where
    R: Stream<Item = Result<String, ()>> + Unpin,
{
    while let Some(Ok(raw)) = source.next().await {
        let hub = hub.clone();
        // Frames from one connection are handled in order; the hub may block
        // on the provider while an intervention runs.
        if tokio::task::spawn_blocking(move || hub.handle_raw(id, &raw)).await.is_err() {
            return;
        }
    }
}

async fn write_loop<W>(
    mut sink: W,
    mut frames: mpsc::Receiver<ServerFrame>,
    outbox: Arc<Outbox>,
    ping_interval: Duration,
) where
    W: Sink<String> + Unpin,
{
    let mut ping = tokio::time::interval_at(tokio::time::Instant::now() + ping_interval, ping_interval);
    loop {
        let frame = tokio::select! {
            f = frames.recv() => match f {
                Some(f) => f,
                None => {
                    if outbox.overflowed() {
                        let f = ServerFrame::error(ErrorCode::Backpressure, "outbound queue full; closing");
                        let _ = sink.send(f.to_json()).await;
                    }
                    break;
                }
            },
            _ = ping.tick() => ServerFrame::Ping {},
        };
        if sink.send(frame.to_json()).await.is_err() {
            break;
        }
    }
    let _ = sink.close().await;
}
