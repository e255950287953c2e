//! Loopback HTTP endpoint for the consent panel and the `leash` client.
//!
//! | route               | purpose                                   |
//! |---------------------|-------------------------------------------|
//! | `GET /pending`      | the held call and its options, or 204     |
//! | `POST /decide`      | answer it with an option index            |
//! | `GET /policy`       | current rules                             |
//! | `GET /audit`        | audit records so far                      |
//! | `GET /audit/stream` | server-sent events: history, then live    |
//! | `POST /invariants`  | add an invariant from rule text           |
//! | `DELETE /rules/{id}`| revoke a user rule                        |

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use leash_core::authorizer::{AuditRecord, SessionError};
use leash_core::policy::{PolicyError, RuleId};
use leash_core::wire::{DecideRequest, DecideResponse, ErrorBody, InvariantRequest, PolicyView, RuleView};
use tokio::net::TcpListener;
use tokio::sync::broadcast;

use crate::state::{Shared, StateError};

struct ApiError(StatusCode, ErrorBody);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::NoPending | SessionError::StaleAsk { .. } => StatusCode::CONFLICT,
            SessionError::BadOption { .. } | SessionError::NotCovering => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, ErrorBody::new(e.to_string()))
    }
}

impl From<PolicyError> for ApiError {
    fn from(e: PolicyError) -> Self {
        let status = match e {
            PolicyError::NoSuchRule(_) => StatusCode::NOT_FOUND,
            PolicyError::InvariantRevocation(_) => StatusCode::FORBIDDEN,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, ErrorBody::new(e.to_string()))
    }
}

impl From<StateError> for ApiError {
    fn from(e: StateError) -> Self {
        match e {
            StateError::Dsl(d) => ApiError(
                StatusCode::BAD_REQUEST,
                ErrorBody {
                    error: d.to_string(),
                    offset: Some(d.offset),
                    expected: d.expected.iter().map(|s| s.to_string()).collect(),
                },
            ),
            StateError::Session(s) => s.into(),
            StateError::Policy(p) => p.into(),
            StateError::NotDeny => ApiError(StatusCode::BAD_REQUEST, ErrorBody::new(e.to_string())),
        }
    }
}

type Shared_ = State<Arc<Shared>>;

async fn pending(State(s): Shared_) -> Response {
    match s.pending() {
        Some(ask) => Json(ask).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn decide(State(s): Shared_, Json(req): Json<DecideRequest>) -> Result<Json<DecideResponse>, ApiError> {
    let outcome = s.decide(req.ask_id, req.option)?;
    Ok(Json(DecideResponse { outcome }))
}

async fn policy(State(s): Shared_) -> Json<PolicyView> {
    Json(PolicyView { rules: s.rules().into_iter().map(RuleView::from).collect() })
}

async fn audit(State(s): Shared_) -> Json<Vec<AuditRecord>> {
    Json(s.audit())
}

fn sse_event(r: &AuditRecord) -> Event {
    Event::default().event("audit").id(r.seq.to_string()).json_data(r).expect("audit records serialize")
}

fn audit_events(s: &Shared) -> impl Stream<Item = Result<Event, Infallible>> {
    let (history, rx) = s.subscribe_audit();
    let live = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(r) => return Some((r, rx)),
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!("audit stream subscriber skipped {n} records"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    stream::iter(history).chain(live).map(|r| Ok(sse_event(&r)))
}

async fn audit_stream(State(s): Shared_) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    Sse::new(audit_events(&s)).keep_alive(KeepAlive::default())
}

async fn add_invariant(State(s): Shared_, Json(req): Json<InvariantRequest>) -> Result<Response, ApiError> {
    if req.text.trim().is_empty() {
        return Ok(StatusCode::NO_CONTENT.into_response());
    }
    let rule = s.add_invariant(&req.text)?;
    Ok((StatusCode::CREATED, Json(RuleView::from(rule))).into_response())
}

async fn revoke(State(s): Shared_, Path(id): Path<String>) -> Result<Json<RuleView>, ApiError> {
    let id: RuleId = id
        .parse()
        .or_else(|_| id.parse::<u64>().map(RuleId))
        .map_err(|_| ApiError(StatusCode::BAD_REQUEST, ErrorBody::new(format!("bad rule id {id:?}"))))?;
    Ok(Json(RuleView::from(s.revoke(id)?)))
}

/// Refuses requests whose Host is not a loopback name, so that a web page
/// cannot reach the API through DNS rebinding.
async fn loopback_host(req: Request, next: Next) -> Response {
    let host = req.headers().get(header::HOST).and_then(|h| h.to_str().ok()).unwrap_or("");
    let name = match host.rsplit_once(':') {
        Some((n, port)) if port.bytes().all(|b| b.is_ascii_digit()) => n,
        _ => host,
    };
    if matches!(name, "127.0.0.1" | "localhost" | "[::1]") {
        next.run(req).await
    } else {
        ApiError(StatusCode::FORBIDDEN, ErrorBody::new("consent API only answers loopback hosts")).into_response()
    }
}

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/pending", get(pending))
        .route("/decide", post(decide))
        .route("/policy", get(policy))
        .route("/audit", get(audit))
        .route("/audit/stream", get(audit_stream))
        .route("/invariants", post(add_invariant))
        .route("/rules/{id}", delete(revoke))
        .layer(middleware::from_fn(loopback_host))
        .with_state(shared)
}

/// Binds `127.0.0.1:port` (0 picks a free port).
pub async fn bind(port: u16) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(("127.0.0.1", port)).await?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}

pub async fn serve(listener: TcpListener, shared: Arc<Shared>) -> std::io::Result<()> {
    axum::serve(listener, router(shared)).await
}
