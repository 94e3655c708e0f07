//! HTTP transport: `POST /predict` with the JSON protocol of the service.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::Router;
use tokio::sync::oneshot;

use super::{VictimClient, VictimService};
use crate::{Error, Result};

/// A running HTTP server. Dropping it shuts the server down.
pub struct HttpServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl HttpServer {
    /// Bind `addr` (port 0 picks a free port) and serve on a background
    /// thread.
    pub fn spawn(service: Arc<VictimService>, addr: SocketAddr) -> Result<Self> {
        let (ready_tx, ready_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("victim-http".into())
            .spawn(move || {
                let rt = match tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_io()
                    .build()
                {
                    Ok(rt) => rt,
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                        return;
                    }
                };
                rt.block_on(async move {
                    let listener = match tokio::net::TcpListener::bind(addr).await {
                        Ok(l) => l,
                        Err(e) => {
                            let _ = ready_tx.send(Err(e));
                            return;
                        }
                    };
                    let _ = ready_tx.send(listener.local_addr());
                    let app = Router::new()
                        .route("/predict", post(predict))
                        .route("/health", get(|| async { "ok" }))
                        .with_state(service);
                    let _ = axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = stop_rx.await;
                        })
                        .await;
                });
            })?;
        let addr = ready_rx
            .recv()
            .map_err(|_| Error::Transport("server thread exited before binding".into()))??;
        Ok(Self {
            addr,
            shutdown: Some(stop_tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

async fn predict(State(service): State<Arc<VictimService>>, body: Bytes) -> impl IntoResponse {
    let (status, body) = tokio::task::spawn_blocking(move || service.handle_bytes(&body))
        .await
        .unwrap_or_else(|e| (500, format!("{{\"error\":\"internal\",\"detail\":\"{e}\"}}").into_bytes()));
    (
        StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        [(header::CONTENT_TYPE, "application/json")],
        body,
    )
}

/// Blocking HTTP client for a remote [`VictimService`].
pub struct HttpClient {
    endpoint: String,
    client_id: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base_url: &str, client_id: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: format!("{}/predict", base_url.trim_end_matches('/')),
            client_id: client_id.into(),
            agent,
        }
    }
}

impl VictimClient for HttpClient {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn query_raw(&self, texts: &[String]) -> Result<(u16, Vec<u8>)> {
        let req = super::PredictRequest {
            client_id: self.client_id.clone(),
            texts: texts.to_vec(),
        };
        let payload = serde_json::to_vec(&req)?;
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(&payload[..])
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok((status, body))
    }
}
