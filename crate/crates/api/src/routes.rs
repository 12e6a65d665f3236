//! The /v1 HTTP surface.

use std::convert::Infallible;
use std::path::PathBuf;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use tower_http::services::ServeDir;

use trigfarm_core::control::{CommandAck, CommandError, ControlCommand, OperatorAction, PolicyUpdate, Speed};
use trigfarm_core::faults::{FaultId, FaultSpec};

use crate::driver::Client;

pub fn router(client: Client, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/farm", get(farm))
        .route("/metrics", get(metrics))
        .route("/report", get(report))
        .route("/state", get(state))
        .route("/commands", get(commands))
        .route("/events", get(events))
        .route("/faults", post(inject_fault))
        .route("/faults/{id}", delete(clear_fault))
        .route("/actions", post(action))
        .route("/policies", put(policies))
        .route("/run/pause", post(pause))
        .route("/run/resume", post(resume))
        .route("/run/speed", post(speed))
        .route("/run/snapshot", post(snapshot))
        .fallback(not_found)
        .with_state(client);
    let app = Router::new().nest("/v1", api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app,
    }
}

fn json<T: Serialize + ?Sized>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn error_status(e: &CommandError) -> StatusCode {
    match e {
        CommandError::UnknownTarget { .. } | CommandError::UnknownFault { .. } => StatusCode::NOT_FOUND,
        CommandError::Invalid { .. } => StatusCode::BAD_REQUEST,
        CommandError::Finished => StatusCode::CONFLICT,
        CommandError::Failed { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn submit(client: &Client, command: ControlCommand, ok: StatusCode) -> Response {
    match client.command(command).await {
        Ok(ack) => json(ok, &ack),
        Err(e) => json(error_status(&e), &e),
    }
}

fn rejected(r: JsonRejection) -> Response {
    json(StatusCode::BAD_REQUEST, &CommandError::invalid(r.body_text()))
}

async fn not_found() -> Response {
    json(StatusCode::NOT_FOUND, &serde_json::json!({ "error": "not_found" }))
}

async fn farm(State(c): State<Client>) -> Response {
    json(StatusCode::OK, &c.published().farm)
}

async fn metrics(State(c): State<Client>) -> Response {
    json(StatusCode::OK, &c.published().metrics)
}

async fn report(State(c): State<Client>) -> Response {
    json(StatusCode::OK, &c.published().report)
}

async fn state(State(c): State<Client>) -> Response {
    json(StatusCode::OK, &c.published().status)
}

async fn commands(State(c): State<Client>) -> Response {
    json(StatusCode::OK, &c.published().commands)
}

async fn events(State(c): State<Client>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = c.subscribe();
    let stream = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(record) => {
                    let event = Event::default().id(record.seq.to_string()).json_data(&*record).unwrap_or_else(|e| Event::default().comment(e.to_string()));
                    return Some((Ok(event), rx));
                }
                Err(RecvError::Lagged(n)) => return Some((Ok(Event::default().comment(format!("lagged {n}"))), rx)),
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn inject_fault(State(c): State<Client>, body: Result<Json<FaultSpec>, JsonRejection>) -> Response {
    match body {
        Ok(Json(fault)) => submit(&c, ControlCommand::InjectFault { fault }, StatusCode::ACCEPTED).await,
        Err(r) => rejected(r),
    }
}

async fn clear_fault(State(c): State<Client>, Path(id): Path<FaultId>) -> Response {
    submit(&c, ControlCommand::ClearFault { id }, StatusCode::OK).await
}

async fn action(State(c): State<Client>, body: Result<Json<OperatorAction>, JsonRejection>) -> Response {
    match body {
        Ok(Json(action)) => submit(&c, ControlCommand::Action { action }, StatusCode::ACCEPTED).await,
        Err(r) => rejected(r),
    }
}

async fn policies(State(c): State<Client>, body: Result<Json<PolicyUpdate>, JsonRejection>) -> Response {
    match body {
        Ok(Json(update)) => submit(&c, ControlCommand::PolicyUpdate { update }, StatusCode::OK).await,
        Err(r) => rejected(r),
    }
}

async fn pause(State(c): State<Client>) -> Response {
    submit(&c, ControlCommand::Pause, StatusCode::OK).await
}

async fn resume(State(c): State<Client>) -> Response {
    submit(&c, ControlCommand::Resume, StatusCode::OK).await
}

#[derive(Deserialize)]
struct SpeedBody {
    speed: Speed,
}

async fn speed(State(c): State<Client>, body: Result<Json<SpeedBody>, JsonRejection>) -> Response {
    match body {
        Ok(Json(SpeedBody { speed })) => submit(&c, ControlCommand::SetSpeed { speed }, StatusCode::OK).await,
        Err(r) => rejected(r),
    }
}

#[derive(Serialize)]
struct SnapshotBody<'a> {
    ack: CommandAck,
    farm: &'a trigfarm_core::control::FarmSnapshot,
    metrics: &'a trigfarm_core::control::MetricsSnapshot,
}

async fn snapshot(State(c): State<Client>) -> Response {
    match c.command(ControlCommand::Snapshot).await {
        Ok(ack) => {
            let p = c.published();
            json(StatusCode::OK, &SnapshotBody { ack, farm: &p.farm, metrics: &p.metrics })
        }
        Err(e) => json(error_status(&e), &e),
    }
}
