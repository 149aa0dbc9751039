mod common;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use futures_util::StreamExt;
use parking_lot::Mutex;
use reqwest::StatusCode;
use scout_core::dataset::Dataset;
use scout_core::mission::initial_head;
use scout_core::protocol::Message;
use scout_core::station::api::{router, ApiState, DecisionResponse, ErrorBody, ReviewItemView};
use scout_core::station::{ItemStatus, MissionStatus, Station, StationConfig, UiEvent};
use serde_json::json;
use tokio_tungstenite::tungstenite::Message as WsMessage;

struct Server {
    base: String,
    station: Arc<Mutex<Station>>,
    ds: Dataset,
}

async fn server() -> Server {
    let ds = Dataset::open(common::small_mission()).unwrap();
    let cfg = StationConfig::default();
    let (head, pool) = initial_head(&ds.root().join("base"), &cfg.detector, 0, &cfg).unwrap();
    let station = Arc::new(Mutex::new(Station::new(cfg, head, pool, None).unwrap()));
    let tick = Arc::new(AtomicU64::new(0));
    let state = ApiState {
        station: Arc::clone(&station),
        clock: Arc::new(move || tick.fetch_add(1, Ordering::SeqCst)),
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        station,
        ds,
    }
}

impl Server {
    fn enqueue(&self, id: u64, score: f64) -> Vec<u8> {
        let image = self.ds.read_bytes(id).unwrap();
        self.station
            .lock()
            .handle_message(
                0,
                Message::Candidate {
                    frame_id: id,
                    score,
                    t_ms: 0,
                    image: image.clone(),
                },
            )
            .unwrap();
        image
    }

    fn novel(&self) -> u64 {
        (0..self.ds.len() as u64)
            .find(|&id| self.ds.annotation_for(id).is_some_and(|a| a.interesting))
            .unwrap()
    }
}

#[tokio::test]
async fn queue_next_is_empty_then_serves_fifo_with_base64_image() {
    let s = server().await;
    let http = reqwest::Client::new();
    let r = http.get(format!("{}/queue/next", s.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);

    let image = s.enqueue(25, 0.8);
    s.enqueue(26, 0.9);
    let item: ReviewItemView = http
        .get(format!("{}/queue/next", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(item.frame_id, 25);
    assert_eq!(item.score, 0.8);
    assert_eq!(item.status, ItemStatus::Pending);
    assert_eq!(STANDARD.decode(&item.image).unwrap(), image);
}

#[tokio::test]
async fn decisions_and_error_statuses() {
    let s = server().await;
    let http = reqwest::Client::new();
    s.enqueue(25, 0.8);
    let novel = s.novel();
    s.enqueue(novel, 0.9);
    let post = |body: serde_json::Value| {
        let http = http.clone();
        let url = format!("{}/decision", s.base);
        async move { http.post(url).json(&body).send().await.unwrap() }
    };

    let r = post(json!({"frame_id": 25, "decision": "uninteresting"})).await;
    assert_eq!(r.status(), StatusCode::OK);
    let body: DecisionResponse = r.json().await.unwrap();
    assert!(body.applied);
    assert_eq!(
        s.station.lock().take_outbox(),
        vec![Message::FeedbackUninteresting { frame_id: 25 }]
    );

    let r = post(json!({"frame_id": 25, "decision": "uninteresting"})).await;
    assert!(!r.json::<DecisionResponse>().await.unwrap().applied);

    let r = post(json!({"frame_id": 25, "decision": "interesting", "boxes": [{"class": "ring", "x": 1, "y": 1, "w": 9, "h": 9}]})).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let r = post(json!({"frame_id": 999, "decision": "uninteresting"})).await;
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    assert!(r.json::<ErrorBody>().await.unwrap().error.contains("999"));

    let r = post(json!({"frame_id": novel, "decision": "interesting", "boxes": []})).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let r = post(json!({"frame_id": novel, "decision": "maybe"})).await;
    assert!(r.status().is_client_error());

    let boxes = serde_json::to_value(&s.ds.annotation_for(novel).unwrap().boxes).unwrap();
    let r = post(json!({"frame_id": novel, "decision": "interesting", "boxes": boxes})).await;
    assert_eq!(r.status(), StatusCode::OK);

    let status: MissionStatus = http
        .get(format!("{}/mission/status", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(status.counts.received, 2);
    assert_eq!(status.counts.pending, 0);
    assert_eq!(status.counts.interesting, 1);
    assert_eq!(status.counts.uninteresting, 1);
    assert_eq!(status.classes.len(), 4);
    assert_eq!(status.pool.novel, 1);
    assert!(status.head_version > 1);
}

#[tokio::test]
async fn events_stream_pushes_queue_and_decision_events() {
    let s = server().await;
    let url = format!("{}/events", s.base.replace("http://", "ws://"));
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    // the subscription is taken during the upgrade; give it a moment
    tokio::time::sleep(Duration::from_millis(50)).await;
    s.enqueue(25, 0.8);
    s.station
        .lock()
        .operator_decision(1, 25, scout_core::station::Decision::Uninteresting, vec![])
        .unwrap();

    let mut events = Vec::new();
    while events.len() < 2 {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("event within 5 s")
            .unwrap()
            .unwrap();
        if let WsMessage::Text(text) = msg {
            let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert!(raw.get("type").is_some(), "{raw}");
            events.push(serde_json::from_value::<UiEvent>(raw).unwrap());
        }
    }
    assert_eq!(
        events,
        vec![
            UiEvent::Queued {
                frame_id: 25,
                score: 0.8,
                pending: 1
            },
            UiEvent::Decided {
                frame_id: 25,
                decision: scout_core::station::Decision::Uninteresting,
                pending: 0
            },
        ]
    );
}
