use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use serde_json::json;
use tokio::sync::oneshot;

use crate::service::{Gateway, GatewayStats, QueryRequest, QueryResponse};
use crate::GatewayError;

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = match &self {
            GatewayError::BadRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::Expert(xroute_core::AdaptorError::Timeout { .. }) => {
                StatusCode::GATEWAY_TIMEOUT
            }
            GatewayError::Expert(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

async fn query(
    State(gateway): State<Arc<Gateway>>,
    Json(request): Json<QueryRequest>,
) -> Result<Json<QueryResponse>, GatewayError> {
    // Adaptors block on I/O or simulated latency.
    tokio::task::spawn_blocking(move || gateway.handle_query(&request))
        .await
        .map_err(|e| GatewayError::Server(e.to_string()))?
        .map(Json)
}

async fn stats(State(gateway): State<Arc<Gateway>>) -> Json<GatewayStats> {
    Json(gateway.stats())
}

async fn healthz(State(gateway): State<Arc<Gateway>>) -> Json<serde_json::Value> {
    let methods: Vec<&str> = gateway.methods().iter().map(|m| m.as_str()).collect();
    Json(json!({ "status": "ok", "methods": methods }))
}

/// `POST /v1/query`, `GET /v1/stats`, `GET /healthz`.
pub fn app(gateway: Arc<Gateway>) -> axum::Router {
    axum::Router::new()
        .route("/v1/query", post(query))
        .route("/v1/stats", get(stats))
        .route("/healthz", get(healthz))
        .with_state(gateway)
}

fn runtime() -> Result<tokio::runtime::Runtime, GatewayError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| GatewayError::Server(e.to_string()))
}

/// Serve on `bind` until Ctrl-C. `on_ready` receives the bound address.
pub fn serve(
    gateway: Arc<Gateway>,
    bind: &str,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), GatewayError> {
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| GatewayError::Server(format!("bind {bind}: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| GatewayError::Server(e.to_string()))?;
        tracing::info!(%addr, "gateway listening");
        on_ready(addr);
        axum::serve(listener, app(gateway))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| GatewayError::Server(e.to_string()))
    })
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<(), GatewayError>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn stop(mut self) -> Result<(), GatewayError> {
        self.halt()
    }

    fn halt(&mut self) -> Result<(), GatewayError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| GatewayError::Server("server thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.halt();
    }
}

/// Bind `bind` (port 0 picks a free one) and serve in the background.
pub fn spawn(gateway: Arc<Gateway>, bind: &str) -> Result<ServerHandle, GatewayError> {
    let rt = runtime()?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(bind))
        .map_err(|e| GatewayError::Server(format!("bind {bind}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| GatewayError::Server(e.to_string()))?;
    let (tx, rx) = oneshot::channel();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            axum::serve(listener, app(gateway))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .map_err(|e| GatewayError::Server(e.to_string()))
        })
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
