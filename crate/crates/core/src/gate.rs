//! Pre-decoding gate: newline-delimited JSON over TCP. Each request line gets
//! exactly one response line, in order, on the same connection.

use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;

use crate::judge::JudgeModel;
use crate::refdb::RefDb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRequest {
    pub request_id: String,
    pub state_vector: Vec<f32>,
    #[serde(default)]
    pub ref_embedding: Option<Vec<f32>>,
    #[serde(default)]
    pub retrieve: Option<bool>,
    #[serde(default)]
    pub query_embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Allow,
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResponse {
    pub request_id: String,
    pub probability: f64,
    /// 1 = leak risk (block), 0 = allow.
    pub decision: u8,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_entry_id: Option<String>,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateErrorResponse {
    pub request_id: Option<String>,
    pub error: String,
}

/// Immutable serving state shared by all connections.
#[derive(Debug)]
pub struct Gate {
    model: JudgeModel,
    refdb: Option<RefDb>,
}

impl Gate {
    pub fn new(mut model: JudgeModel, refdb: Option<RefDb>, tau_override: Option<f32>) -> Result<Self, String> {
        if let Some(tau) = tau_override {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(format!("tau override {tau} must lie in (0, 1)"));
            }
            model.tau = tau;
        }
        if let Some(db) = &refdb {
            if model.provenance.with_reference && db.ref_dim != model.ref_dim() {
                return Err(format!(
                    "reference database embeddings have dim {}, model expects {}",
                    db.ref_dim,
                    model.ref_dim()
                ));
            }
        }
        Ok(Self { model, refdb })
    }

    pub fn model(&self) -> &JudgeModel {
        &self.model
    }

    pub fn handle(&self, req: &GateRequest) -> Result<GateResponse, String> {
        let start = Instant::now();
        if req.state_vector.is_empty() {
            return Err("state_vector is empty".into());
        }
        let mut retrieved_entry_id = None;
        let retrieved: Option<Vec<f32>> = match (&req.ref_embedding, req.retrieve.unwrap_or(false)) {
            (None, true) => {
                let db = self.refdb.as_ref().ok_or("retrieve requested but no reference database is loaded")?;
                let q = req
                    .query_embedding
                    .as_ref()
                    .ok_or("retrieve requires query_embedding")?;
                let hit = db.retrieve(q).map_err(|e| e.to_string())?;
                retrieved_entry_id = Some(hit.entry_id);
                Some(hit.embedding)
            }
            _ => None,
        };
        let reference = req.ref_embedding.as_deref().or(retrieved.as_deref());
        let pred = self.model.predict(&req.state_vector, reference).map_err(|e| e.to_string())?;
        Ok(GateResponse {
            request_id: req.request_id.clone(),
            probability: pred.probability,
            decision: pred.decision,
            action: if pred.decision == 1 { Action::Block } else { Action::Allow },
            retrieved_entry_id,
            latency_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Answers one request line with one JSON response line (no newline).
    pub fn handle_line(&self, line: &str) -> String {
        let result = match serde_json::from_str::<GateRequest>(line) {
            Ok(req) => self.handle(&req).map_err(|e| (Some(req.request_id.clone()), e)),
            Err(e) => {
                // Salvage the id when the line is an object with a string request_id.
                let id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(|x| x.as_str()).map(str::to_string));
                Err((id, format!("malformed request: {e}")))
            }
        };
        match result {
            Ok(resp) => serde_json::to_string(&resp),
            Err((request_id, error)) => serde_json::to_string(&GateErrorResponse { request_id, error }),
        }
        .expect("responses serialize")
    }
}

async fn handle_connection(stream: TcpStream, gate: Arc<Gate>) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let mut out = gate.handle_line(&line);
        out.push('\n');
        write.write_all(out.as_bytes()).await?;
    }
    write.shutdown().await
}

/// Accepts connections until `shutdown` resolves, then waits up to `drain`
/// for open connections to finish.
pub async fn serve(listener: TcpListener, gate: Arc<Gate>, shutdown: impl Future<Output = ()>, drain: Duration) {
    let mut tasks = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => {
                    let gate = Arc::clone(&gate);
                    tasks.spawn(async move {
                        let _ = handle_connection(stream, gate).await;
                    });
                }
                Err(e) => eprintln!("accept failed: {e}"),
            },
            Some(_) = tasks.join_next(), if !tasks.is_empty() => {}
        }
    }
    let _ = tokio::time::timeout(drain, async { while tasks.join_next().await.is_some() {} }).await;
    tasks.abort_all();
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
