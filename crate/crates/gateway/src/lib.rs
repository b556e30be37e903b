//! Serving endpoint for trained routers: each query is routed to one expert,
//! rendered through that expert's prompt template, dispatched, and
//! accounted for in the gateway stats.

mod config;
mod prompt;
mod remote;
mod server;
mod service;

use thiserror::Error;
use xroute_core::eval::EvalError;
use xroute_core::routers::RouterError;
use xroute_core::AdaptorError;

pub use config::{
    AdaptorKind, ExpertEndpointConfig, FallbackPolicy, FleetSource, GatewayConfig, Locality,
    LocalityPolicy, RemoteEndpoint,
};
pub use prompt::{render_prompt, validate_template, PLACEHOLDER};
pub use remote::RemoteAdaptor;
pub use server::{app, serve, spawn, ServerHandle};
pub use service::{
    endpoints_from_config, pricing_from_config, Endpoint, Gateway, GatewayOptions, GatewayStats,
    QueryRequest, QueryResponse, LATENCY_WINDOW,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Pricing(#[from] EvalError),
    #[error(transparent)]
    Expert(#[from] AdaptorError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("server: {0}")]
    Server(String),
}
