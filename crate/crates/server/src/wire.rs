//! HTTP face of a virtual module.
//!
//! ```text
//! PUT  /skills/{id}/parameters            {name: value}  → 204 | 400 | 404 | 409
//! POST /skills/{id}/transitions/{command}                → 202 {"state"} | 400 | 404 | 409
//! GET  /skills/{id}/state                                → 200 {"state", "seq", "outputs", "parameters"}
//! GET  /skills/{id}/events?since=&timeoutMs=             → 200 [{"seq", "state"}]
//! POST /skills/{id}/inject  {"mode", "phase", "oneShot"} → 204
//! ```

use std::net::SocketAddr;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use skillflow_core::plant::{FailureInjection, PlantConfig, PlantError, VirtualModule};
use skillflow_core::registry::MachineDocument;
use skillflow_core::state_machine::TransitionCommand;
use skillflow_core::Variables;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

/// Longest long-poll a client may ask for.
pub const MAX_POLL: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {port} unavailable: {reason}")]
    PortUnavailable { port: u16, reason: String },
    #[error(transparent)]
    Plant(#[from] PlantError),
}

struct WireError(PlantError);

impl IntoResponse for WireError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            PlantError::UnknownSkill(_) => StatusCode::NOT_FOUND,
            PlantError::WrongState(_) | PlantError::IllegalTransition(_) => StatusCode::CONFLICT,
            PlantError::UnknownParameter(_) | PlantError::DatatypeMismatch { .. } | PlantError::Config(_) => {
                StatusCode::BAD_REQUEST
            }
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<PlantError> for WireError {
    fn from(e: PlantError) -> Self {
        WireError(e)
    }
}

fn bad_request(message: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": message }))).into_response()
}

/// Every malformed body is a 400, whatever the reason.
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid body: {e}")))
}

async fn set_parameters(State(m): State<VirtualModule>, Path(skill): Path<String>, body: Bytes) -> Response {
    let values: Variables = match parse_body(&body) {
        Ok(v) => v,
        Err(r) => return r,
    };
    match m.set_parameters(&skill, values) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => WireError(e).into_response(),
    }
}

async fn transition(State(m): State<VirtualModule>, Path((skill, command)): Path<(String, String)>) -> Response {
    let Ok(command) = command.parse::<TransitionCommand>() else {
        return bad_request(format!("unknown command {command}"));
    };
    match m.invoke_transition(&skill, command) {
        Ok(state) => (StatusCode::ACCEPTED, Json(json!({ "state": state }))).into_response(),
        Err(e) => WireError(e).into_response(),
    }
}

async fn state(State(m): State<VirtualModule>, Path(skill): Path<String>) -> Result<Response, WireError> {
    let rec = m.get_state(&skill)?;
    Ok(Json(json!({
        "state": rec.state,
        "seq": rec.event_seq,
        "outputs": rec.outputs,
        "parameters": rec.parameters,
    }))
    .into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    timeout_ms: u64,
}

async fn events(
    State(m): State<VirtualModule>,
    Path(skill): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Response, WireError> {
    let timeout = Duration::from_millis(q.timeout_ms).min(MAX_POLL);
    Ok(Json(m.poll_events(&skill, q.since, timeout).await?).into_response())
}

async fn inject(State(m): State<VirtualModule>, Path(skill): Path<String>, body: Bytes) -> Response {
    let injection: FailureInjection = match parse_body(&body) {
        Ok(v) => v,
        Err(r) => return r,
    };
    match m.inject_failure(&skill, injection) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => WireError(e).into_response(),
    }
}

pub fn router(module: VirtualModule) -> Router {
    Router::new()
        .route("/skills/{skill}/parameters", put(set_parameters))
        .route("/skills/{skill}/transitions/{command}", post(transition))
        .route("/skills/{skill}/state", get(state))
        .route("/skills/{skill}/events", get(events))
        .route("/skills/{skill}/inject", post(inject))
        .with_state(module)
}

/// A module served over HTTP. Dropping it stops the server.
pub struct ServedModule {
    pub module: VirtualModule,
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl ServedModule {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and waits for the server to finish.
    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

impl Drop for ServedModule {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Serves `module` on `addr`; port 0 picks a free port.
pub async fn serve_module(module: VirtualModule, addr: SocketAddr) -> Result<ServedModule, ServeError> {
    let listener = TcpListener::bind(addr).await.map_err(|e| ServeError::PortUnavailable {
        port: addr.port(),
        reason: e.to_string(),
    })?;
    let addr = listener.local_addr().map_err(|e| ServeError::PortUnavailable {
        port: addr.port(),
        reason: e.to_string(),
    })?;
    let (tx, rx) = oneshot::channel();
    let app = router(module.clone());
    let task = tokio::spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = server.await {
            tracing::error!("plant server on {addr}: {e}");
        }
    });
    Ok(ServedModule {
        module,
        addr,
        shutdown: Some(tx),
        task,
    })
}

/// Spawns and serves every module of a plant file. Entries without a port
/// get a free one.
pub async fn serve_plant<'a>(
    plant: &PlantConfig,
    machines: impl IntoIterator<Item = &'a MachineDocument>,
    host: std::net::IpAddr,
) -> Result<Vec<ServedModule>, ServeError> {
    let mut served = Vec::new();
    for (config, port) in plant.module_configs(machines)? {
        let module = VirtualModule::spawn(config)?;
        served.push(serve_module(module, SocketAddr::new(host, port.unwrap_or(0))).await?);
    }
    Ok(served)
}
