use std::time::Duration;

use advocate_core::config::AppConfig;
use advocate_server::{build_hub, codec, serve, serve_websocket};
use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_util::codec::Framed;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

async fn next_json(ws: &mut Ws) -> Value {
    loop {
        let msg =
            tokio::time::timeout(Duration::from_secs(5), ws.next()).await.expect("frame within 5s").unwrap().unwrap();
        if let Message::Text(t) = msg {
            let v: Value = serde_json::from_str(t.as_str()).unwrap();
            if v["type"] != "ping" {
                return v;
            }
        }
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

#[tokio::test]
async fn websocket_and_tcp_clients_share_a_room() {
    let hub = build_hub(&AppConfig::default()).unwrap();
    let tcp = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let ws_listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (tcp_addr, ws_addr) = (tcp.local_addr().unwrap(), ws_listener.local_addr().unwrap());
    tokio::spawn(serve(tcp, hub.clone(), Duration::from_secs(60)));
    tokio::spawn(serve_websocket(ws_listener, hub, Duration::from_secs(60)));

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{ws_addr}")).await.unwrap();
    send(&mut ws, json!({"type": "join", "room_id": "r", "sender": "web_1"})).await;
    assert_eq!(next_json(&mut ws).await, json!({"type": "ack", "room_id": "r", "of": "join", "seq": 0}));

    let mut tcp = Framed::new(TcpStream::connect(tcp_addr).await.unwrap(), codec());
    tcp.send(Bytes::from(json!({"type": "join", "room_id": "r", "sender": "cli_2"}).to_string())).await.unwrap();
    tcp.send(Bytes::from(
        json!({"type": "post_public", "room_id": "r", "sender": "cli_2", "body": "hello"}).to_string(),
    ))
    .await
    .unwrap();
    assert_eq!(
        next_json(&mut ws).await,
        json!({"type": "broadcast", "room_id": "r", "seq": 1, "sender": "cli_2", "body": "hello"})
    );

    send(&mut ws, json!({"type": "post_public", "room_id": "r", "sender": "web_1", "body": "hi back"})).await;
    let mut own = [next_json(&mut ws).await, next_json(&mut ws).await];
    own.sort_by_key(|f| f["type"].to_string());
    assert_eq!(own[0], json!({"type": "ack", "room_id": "r", "of": "post_public", "seq": 2}));
    assert_eq!(own[1]["seq"], 2);

    ws.send(Message::text("{oops")).await.unwrap();
    assert_eq!(next_json(&mut ws).await["code"], "malformed_frame");
}

#[tokio::test]
async fn websocket_close_releases_the_participant_id() {
    let hub = build_hub(&AppConfig::default()).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_websocket(listener, hub, Duration::from_secs(60)));

    let (mut first, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap();
    send(&mut first, json!({"type": "join", "room_id": "r", "sender": "dana"})).await;
    assert_eq!(next_json(&mut first).await["type"], "ack");
    first.close(None).await.unwrap();

    for _ in 0..50 {
        tokio::time::sleep(Duration::from_millis(20)).await;
        let (mut again, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap();
        send(&mut again, json!({"type": "join", "room_id": "r", "sender": "dana"})).await;
        if next_json(&mut again).await["type"] == "ack" {
            return;
        }
    }
    panic!("id never released");
}

#[tokio::test]
async fn websocket_pings_arrive() {
    let hub = build_hub(&AppConfig::default()).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_websocket(listener, hub, Duration::from_millis(50)));
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap();
    let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
    assert_eq!(msg, Message::text(r#"{"type":"ping"}"#));
}
