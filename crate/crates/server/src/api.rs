//! HTTP routes of the service.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use skillflow_core::registry::MachineDocument;
use skillflow_core::Variables;

use crate::app::{ApiError, App, DecisionRequest, ResolutionRequest, StartRequest};

/// Default and upper bound for instance event long-polls.
pub const DEFAULT_POLL: Duration = Duration::from_secs(20);
pub const MAX_POLL: Duration = Duration::from_secs(60);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

type Shared = State<Arc<App>>;
type Reply = Result<Response, ApiError>;

fn json_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

fn ok<T: serde::Serialize>(value: T) -> Reply {
    Ok(Json(value).into_response())
}

fn created<T: serde::Serialize>(value: T) -> Reply {
    Ok((StatusCode::CREATED, Json(value)).into_response())
}

async fn deploy(State(app): Shared, body: Bytes) -> Reply {
    created(app.deploy(body.to_vec())?)
}

async fn list_processes(State(app): Shared) -> Reply {
    ok(app.deployments())
}

async fn get_process(State(app): Shared, Path(id): Path<String>) -> Reply {
    ok(app.deployment_record(&id)?)
}

async fn get_process_xml(State(app): Shared, Path(id): Path<String>) -> Reply {
    let xml = app.deployment_xml(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/xml")], xml.as_ref().clone()).into_response())
}

async fn create_resolution(State(app): Shared, Path(id): Path<String>, body: Bytes) -> Reply {
    let req: ResolutionRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ResolutionRequest::default()
    } else {
        json_body(&body)?
    };
    created(app.create_resolution(&id, req.policy)?)
}

async fn get_resolution(State(app): Shared, Path(id): Path<String>) -> Reply {
    ok(app.session(&id)?)
}

async fn submit_decision(State(app): Shared, Path(id): Path<String>, body: Bytes) -> Reply {
    let req: DecisionRequest = json_body(&body)?;
    ok(app.submit_decision(&id, &req.task_id, &req.skill)?)
}

async fn start_instance(State(app): Shared, body: Bytes) -> Reply {
    let req: StartRequest = json_body(&body)?;
    created(app.start_instance(&req.session_id, req.variables)?)
}

async fn list_instances(State(app): Shared) -> Reply {
    ok(app.instances())
}

async fn get_instance(State(app): Shared, Path(id): Path<String>) -> Reply {
    ok(app.snapshot(&id)?)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    timeout_ms: Option<u64>,
}

async fn instance_events(State(app): Shared, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> Reply {
    let timeout = q.timeout_ms.map_or(DEFAULT_POLL, Duration::from_millis).min(MAX_POLL);
    ok(app.events(&id, q.since, timeout).await?)
}

async fn complete_user_task(State(app): Shared, Path((id, task)): Path<(String, String)>, body: Bytes) -> Reply {
    let values: Variables = json_body(&body)?;
    app.complete_user_task(&id, &task, values)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn cancel_instance(State(app): Shared, Path(id): Path<String>) -> Reply {
    app.cancel_instance(&id)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn notifications(State(app): Shared) -> Reply {
    ok(app.notifications())
}

async fn capabilities(State(app): Shared) -> Reply {
    ok(app.capabilities())
}

async fn machines(State(app): Shared) -> Reply {
    ok(app.machines())
}

async fn register_machine(State(app): Shared, body: Bytes) -> Reply {
    let doc: MachineDocument = json_body(&body)?;
    created(app.register_machine(doc)?)
}

async fn unregister_machine(State(app): Shared, Path(iri): Path<String>) -> Reply {
    app.unregister_machine(&iri)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn fallback() -> ApiError {
    ApiError::new(404, "NotFound", "no such endpoint")
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/processes", post(deploy).get(list_processes))
        .route("/processes/{id}", get(get_process))
        .route("/processes/{id}/xml", get(get_process_xml))
        .route("/processes/{id}/resolutions", post(create_resolution))
        .route("/resolutions/{id}", get(get_resolution))
        .route("/resolutions/{id}/decisions", post(submit_decision))
        .route("/instances", post(start_instance).get(list_instances))
        .route("/instances/{id}", get(get_instance))
        .route("/instances/{id}/events", get(instance_events))
        .route("/instances/{id}/user-tasks/{task}/complete", post(complete_user_task))
        .route("/instances/{id}/cancel", post(cancel_instance))
        .route("/notifications", get(notifications))
        .route("/registry/capabilities", get(capabilities))
        .route("/registry/machines", get(machines).post(register_machine))
        .route("/registry/machines/{iri}", delete(unregister_machine))
        .fallback(fallback)
        .with_state(app)
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    app: Arc<App>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}
