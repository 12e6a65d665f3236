//! HTTP control API for a running farm simulation.
//!
//! [`SimHandle::spawn`] moves a [`Runner`](trigfarm_core::runner::Runner)
//! onto its own thread; [`router`] exposes it under `/v1`.

mod driver;
mod routes;

use std::future::Future;

pub use driver::{Client, DriverOptions, Published, RunStatus, SimHandle, Stopped};
pub use routes::router;

#[derive(Debug, thiserror::Error)]
#[error("cannot bind {addr}: {source}")]
pub struct BindFailure {
    pub addr: String,
    #[source]
    pub source: std::io::Error,
}

pub async fn bind(addr: &str) -> Result<tokio::net::TcpListener, BindFailure> {
    tokio::net::TcpListener::bind(addr).await.map_err(|source| BindFailure { addr: addr.to_string(), source })
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve(listener: tokio::net::TcpListener, app: axum::Router, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
