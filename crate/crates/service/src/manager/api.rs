//! Operator HTTP API.

use std::convert::Infallible;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use mnsm_core::aggregator::{DisplayUpdate, OperatorAction};
use mnsm_core::config::FieldError;
use mnsm_core::ManagerConfig;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use super::{ActionError, ApiRequest, ManagerHandle};

pub fn router(handle: ManagerHandle) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/nodes", get(nodes))
        .route("/aggregate", get(aggregate))
        .route("/config", get(config).put(set_config))
        .route("/command", post(command))
        .route("/nodes/{name}/kill", post(kill))
        .route("/nodes/{name}/restart", post(restart))
        .route("/nodes/{name}/clear", post(clear))
        .route("/nodes/{name}/log", get(log))
        .route("/events", get(events))
        .with_state(handle)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn gone() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "manager loop stopped")
}

async fn index() -> Html<&'static str> {
    Html(include_str!("index.html"))
}

async fn nodes(State(h): State<ManagerHandle>) -> Response {
    match h.ask(ApiRequest::Nodes).await {
        Some(nodes) => {
            let records: Vec<DisplayUpdate> = nodes.into_iter().map(DisplayUpdate::Node).collect();
            Json(records).into_response()
        }
        None => gone(),
    }
}

async fn aggregate(State(h): State<ManagerHandle>) -> Response {
    match h.ask(ApiRequest::Aggregate).await {
        Some(view) => Json(view).into_response(),
        None => gone(),
    }
}

async fn config(State(h): State<ManagerHandle>) -> Response {
    match h.ask(ApiRequest::Config).await {
        Some(view) => Json(view).into_response(),
        None => gone(),
    }
}

async fn set_config(State(h): State<ManagerHandle>, body: Result<Json<ManagerConfig>, JsonRejection>) -> Response {
    let config = match body {
        Ok(Json(config)) => config,
        Err(e) => {
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(json!({ "error": e.body_text(), "fields": Vec::<FieldError>::new() })),
            )
                .into_response()
        }
    };
    match h.ask(|r| ApiRequest::SetConfig(config, r)).await {
        Some(Ok(view)) => Json(view).into_response(),
        Some(Err(e)) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "error": e.to_string(), "fields": e.fields })),
        )
            .into_response(),
        None => gone(),
    }
}

#[derive(Deserialize)]
struct CommandBody {
    name: String,
}

async fn command(State(h): State<ManagerHandle>, body: Result<Json<CommandBody>, JsonRejection>) -> Response {
    let name = match body {
        Ok(Json(b)) if !b.name.trim().is_empty() && !b.name.contains(char::is_whitespace) => b.name,
        Ok(_) => return error(StatusCode::UNPROCESSABLE_ENTITY, "command name must be one non-empty word"),
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()),
    };
    match h.ask(|r| ApiRequest::Command(name, r)).await {
        Some(view) => Json(view).into_response(),
        None => gone(),
    }
}

fn action_error(e: ActionError, node: &str) -> Response {
    match e {
        ActionError::UnknownNode => error(StatusCode::NOT_FOUND, format!("unknown node {node}")),
        ActionError::NotConnected => error(StatusCode::CONFLICT, format!("node {node} is not connected")),
        ActionError::Refused(why) => error(StatusCode::CONFLICT, why),
    }
}

async fn operator(h: ManagerHandle, action: OperatorAction, node: String) -> Response {
    match h.ask(|r| ApiRequest::Operator(action, node.clone(), r)).await {
        Some(Ok(view)) => Json(DisplayUpdate::Node(view)).into_response(),
        Some(Err(e)) => action_error(e, &node),
        None => gone(),
    }
}

async fn kill(State(h): State<ManagerHandle>, Path(name): Path<String>) -> Response {
    operator(h, OperatorAction::Kill, name).await
}

async fn restart(State(h): State<ManagerHandle>, Path(name): Path<String>) -> Response {
    operator(h, OperatorAction::Restart, name).await
}

async fn clear(State(h): State<ManagerHandle>, Path(name): Path<String>) -> Response {
    operator(h, OperatorAction::ClearUnavailable, name).await
}

#[derive(Deserialize)]
struct LogQuery {
    #[serde(default = "default_lines")]
    lines: u32,
}

fn default_lines() -> u32 {
    200
}

async fn log(State(h): State<ManagerHandle>, Path(node): Path<String>, Query(q): Query<LogQuery>) -> Response {
    let timeout = h.log_timeout;
    let pending = match h
        .ask(|reply| ApiRequest::Log {
            node: node.clone(),
            lines: q.lines,
            reply,
        })
        .await
    {
        Some(Ok(rx)) => rx,
        Some(Err(e)) => return action_error(e, &node),
        None => return gone(),
    };
    match tokio::time::timeout(timeout, pending).await {
        Ok(Ok(text)) => ([("content-type", "text/plain; charset=utf-8")], text).into_response(),
        Ok(Err(_)) => error(StatusCode::CONFLICT, format!("node {node} went away")),
        Err(_) => error(StatusCode::GATEWAY_TIMEOUT, format!("node {node} did not answer")),
    }
}

async fn events(State(h): State<ManagerHandle>) -> Response {
    let Some((snapshot, rx)) = h.ask(ApiRequest::Subscribe).await else {
        return gone();
    };
    Sse::new(update_stream(snapshot, rx))
        .keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
        .into_response()
}

fn to_event(update: &DisplayUpdate) -> Result<Event, Infallible> {
    Ok(Event::default()
        .event("update")
        .data(serde_json::to_string(update).expect("display updates serialize")))
}

/// The snapshot records first, then live updates. A console that falls more
/// than the backlog behind is cut off and has to re-snapshot.
fn update_stream(
    snapshot: Vec<DisplayUpdate>,
    rx: tokio::sync::broadcast::Receiver<DisplayUpdate>,
) -> impl Stream<Item = Result<Event, Infallible>> {
    let first = stream::iter(snapshot.iter().map(to_event).collect::<Vec<_>>());
    let live = stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(update) => Some((to_event(&update), rx)),
            Err(RecvError::Lagged(n)) => {
                tracing::warn!(missed = n, "console fell behind, dropping its stream");
                None
            }
            Err(RecvError::Closed) => None,
        }
    });
    first.chain(live)
}
