//! Minimal JSON-RPC client over HTTP.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde_json::Value;
use thiserror::Error;

use crate::protocol::{Request, Response, RpcError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach gateway: {0}")]
    Connection(String),
    #[error("{0}")]
    Rpc(RpcError),
    #[error("bad response: {0}")]
    Protocol(String),
}

#[derive(Debug)]
pub struct Client {
    http: reqwest::Client,
    url: String,
    next_id: AtomicU64,
}

impl Client {
    /// `url` is the full endpoint, e.g. `http://127.0.0.1:7878/rpc`. A bare
    /// `host:port` or a URL without a path gets `/rpc` appended.
    pub fn new(url: &str) -> Self {
        Self { http: reqwest::Client::new(), url: normalize(url), next_id: AtomicU64::new(1) }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POST a raw body; returns the status and the body text.
    pub async fn post_raw(&self, body: String) -> Result<(u16, String), ClientError> {
        let resp = self
            .http
            .post(&self.url)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| ClientError::Connection(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().await.map_err(|e| ClientError::Connection(e.to_string()))?;
        Ok((status, text))
    }

    pub async fn call(&self, method: &str, params: Value) -> Result<Value, ClientError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let body = serde_json::to_string(&Request::new(id, method, params)).expect("requests serialize");
        let (_, text) = self.post_raw(body).await?;
        let resp: Response = serde_json::from_str(&text).map_err(|e| ClientError::Protocol(format!("{e}: {text}")))?;
        resp.into_result().map_err(ClientError::Rpc)
    }

    pub async fn call_as<T: DeserializeOwned>(&self, method: &str, params: Value) -> Result<T, ClientError> {
        let v = self.call(method, params).await?;
        serde_json::from_value(v).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    /// Send several calls as one batch; results come back in request order.
    pub async fn batch(&self, calls: &[(&str, Value)]) -> Result<Vec<Result<Value, RpcError>>, ClientError> {
        let first = self.next_id.fetch_add(calls.len() as u64, Ordering::Relaxed);
        let reqs: Vec<Request> =
            calls.iter().enumerate().map(|(i, (m, p))| Request::new(first + i as u64, m, p.clone())).collect();
        let (_, text) = self.post_raw(serde_json::to_string(&reqs).expect("requests serialize")).await?;
        let mut resps: Vec<Response> =
            serde_json::from_str(&text).map_err(|e| ClientError::Protocol(format!("{e}: {text}")))?;
        resps.sort_by_key(|r| r.id.as_u64().unwrap_or(u64::MAX));
        if resps.len() != calls.len() {
            return Err(ClientError::Protocol(format!("{} responses to {} calls", resps.len(), calls.len())));
        }
        Ok(resps.into_iter().map(Response::into_result).collect())
    }
}

fn normalize(url: &str) -> String {
    let with_scheme = if url.contains("://") { url.to_string() } else { format!("http://{url}") };
    let after_scheme = with_scheme.split_once("://").map_or("", |(_, rest)| rest);
    if after_scheme.contains('/') {
        with_scheme
    } else {
        format!("{with_scheme}/rpc")
    }
}
