//! Operator HTTP API and the `/events` WebSocket stream.

use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;

use super::{Decision, DecisionOutcome, ItemStatus, MissionStatus, ReviewItem, Station};
use crate::dataset::AnnotatedBox;
use crate::error::Error;

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

#[derive(Clone)]
pub struct ApiState {
    pub station: Arc<Mutex<Station>>,
    pub clock: Clock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItemView {
    pub frame_id: u64,
    /// Base64 of the image bytes as received from the robot.
    pub image: String,
    pub score: f64,
    pub received_at: u64,
    pub status: ItemStatus,
}

impl From<&ReviewItem> for ReviewItemView {
    fn from(i: &ReviewItem) -> Self {
        Self {
            frame_id: i.frame_id,
            image: STANDARD.encode(&i.image),
            score: i.score,
            received_at: i.received_at,
            status: i.status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub frame_id: u64,
    pub decision: Decision,
    #[serde(default)]
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub frame_id: u64,
    /// False when the same decision had already been applied.
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Validation(_) | Error::InvalidInput(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Capacity(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (
            status,
            Json(ErrorBody {
                error: self.0.to_string(),
            }),
        )
            .into_response()
    }
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/queue/next", get(queue_next))
        .route("/decision", post(decision))
        .route("/mission/status", get(mission_status))
        .route("/events", get(events))
        .with_state(state)
}

async fn queue_next(State(s): State<ApiState>) -> Response {
    match s.station.lock().next_pending() {
        Some(item) => Json(ReviewItemView::from(item)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn decision(
    State(s): State<ApiState>,
    Json(req): Json<DecisionRequest>,
) -> Result<Json<DecisionResponse>, ApiError> {
    let mut station = s.station.lock();
    // stamp under the lock so store times stay ordered
    let t = (s.clock)();
    let outcome = station
        .operator_decision(t, req.frame_id, req.decision, req.boxes)
        .map_err(ApiError)?;
    drop(station);
    Ok(Json(DecisionResponse {
        frame_id: req.frame_id,
        applied: outcome == DecisionOutcome::Applied,
    }))
}

async fn mission_status(State(s): State<ApiState>) -> Json<MissionStatus> {
    Json(s.station.lock().status())
}

async fn events(State(s): State<ApiState>, ws: WebSocketUpgrade) -> Response {
    let rx = s.station.lock().subscribe();
    ws.on_upgrade(move |socket| forward_events(socket, rx))
}

async fn forward_events(mut socket: WebSocket, mut rx: tokio::sync::broadcast::Receiver<super::UiEvent>) {
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) => {
                    let Ok(text) = serde_json::to_string(&ev) else { continue };
                    if socket.send(WsMessage::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(n)) => log::warn!("events subscriber lagged by {n}"),
                Err(RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
