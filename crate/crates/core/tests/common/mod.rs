#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use advloop_core::gateway::{EndpointDescriptor, Gateway};
use advloop_core::model::TaskType;
use advloop_core::orchestrator::Orchestrator;
use advloop_core::storage::Store;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::net::TcpListener;

/// How a fake model endpoint answers.
#[derive(Clone)]
pub struct StubBehavior {
    pub delay: Duration,
    pub status: u16,
    pub body: Value,
    pub healthy: bool,
}

impl StubBehavior {
    pub fn ok(body: Value) -> Self {
        StubBehavior {
            delay: Duration::ZERO,
            status: 200,
            body,
            healthy: true,
        }
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay = Duration::from_millis(ms);
        self
    }
}

pub struct Stub {
    pub addr: SocketAddr,
    pub hits: Arc<AtomicUsize>,
}

impl Stub {
    pub fn base(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn endpoint(&self, id: &str, task_type: TaskType) -> EndpointDescriptor {
        EndpointDescriptor::new(id, self.base(), task_type)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

pub async fn spawn_stub(behavior: StubBehavior) -> Stub {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let b = behavior.clone();
    let app = Router::new()
        .route(
            "/health",
            get(move || {
                let healthy = behavior.healthy;
                async move { Json(json!({ "status": if healthy { "ok" } else { "degraded" } })) }
            }),
        )
        .route(
            "/v1/predict",
            post(move |Json(_req): Json<Value>| {
                let b = b.clone();
                counter.fetch_add(1, Ordering::SeqCst);
                async move {
                    tokio::time::sleep(b.delay).await;
                    (StatusCode::from_u16(b.status).unwrap(), Json(b.body))
                }
            }),
        );
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Stub { addr, hits }
}

/// An address nothing listens on.
pub async fn dead_address() -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    addr
}

pub fn probs(pairs: &[(&str, f64)]) -> Value {
    let map: serde_json::Map<String, Value> = pairs.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    json!({ "label_probs": map })
}

pub async fn reference_origin() -> String {
    let (addr, _handle) = advloop_core::reference::spawn_local().await.unwrap();
    format!("http://{addr}")
}

pub fn orchestrator() -> Orchestrator {
    Orchestrator::new(Arc::new(Store::in_memory()), Gateway::new())
}
