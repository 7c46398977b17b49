//! JSON-RPC 2.0 envelopes and error codes.

use gridhelm_core::error::{ErrorCode, GridError, ERROR_CODES};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const INTERNAL_ERROR: i64 = -32603;

pub const DUPLICATE_SERVICE: i64 = 1801;
pub const UNKNOWN_SERVICE: i64 = 1802;

/// Protocol-level and gateway codes, listed next to the module codes by
/// `rpc.describe`.
pub const GATEWAY_CODES: &[ErrorCode] = &[
    ErrorCode { code: PARSE_ERROR, module: "jsonrpc", name: "ParseError" },
    ErrorCode { code: INVALID_REQUEST, module: "jsonrpc", name: "InvalidRequest" },
    ErrorCode { code: METHOD_NOT_FOUND, module: "jsonrpc", name: "MethodNotFound" },
    ErrorCode { code: INVALID_PARAMS, module: "jsonrpc", name: "InvalidParams" },
    ErrorCode { code: INTERNAL_ERROR, module: "jsonrpc", name: "InternalError" },
    ErrorCode { code: DUPLICATE_SERVICE, module: "rpc_gateway", name: "DuplicateService" },
    ErrorCode { code: UNKNOWN_SERVICE, module: "rpc_gateway", name: "UnknownService" },
];

/// Every code a client can receive, in ascending order.
pub fn error_table() -> Vec<ErrorCode> {
    let mut all: Vec<ErrorCode> = GATEWAY_CODES.iter().chain(ERROR_CODES).copied().collect();
    all.sort_by_key(|c| c.code);
    all
}

pub fn code_name(code: i64) -> Option<&'static str> {
    GATEWAY_CODES.iter().chain(ERROR_CODES).find(|c| c.code == code).map(|c| c.name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcError {
    pub code: i64,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

impl RpcError {
    pub fn new(code: i64, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), data: None }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self::new(PARSE_ERROR, message)
    }

    pub fn invalid_request(message: impl Into<String>) -> Self {
        Self::new(INVALID_REQUEST, message)
    }

    pub fn method_not_found(method: &str) -> Self {
        Self::new(METHOD_NOT_FOUND, format!("method not found: {method}"))
    }

    pub fn invalid_params(message: impl Into<String>) -> Self {
        Self::new(INVALID_PARAMS, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(INTERNAL_ERROR, message)
    }

    /// The symbolic name of the code, when it has one.
    pub fn name(&self) -> Option<&'static str> {
        code_name(self.code)
    }
}

impl std::fmt::Display for RpcError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.name() {
            Some(n) => write!(f, "{n} ({}): {}", self.code, self.message),
            None => write!(f, "error {}: {}", self.code, self.message),
        }
    }
}

impl std::error::Error for RpcError {}

impl<E: Into<GridError>> From<E> for RpcError {
    fn from(e: E) -> Self {
        let e: GridError = e.into();
        let info = e.info();
        Self { code: info.code, message: e.to_string(), data: Some(Value::String(info.name.to_string())) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub jsonrpc: String,
    pub method: String,
    #[serde(default)]
    pub params: Value,
    /// Absent for notifications.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
}

impl Request {
    pub fn new(id: u64, method: &str, params: Value) -> Self {
        Self { jsonrpc: "2.0".into(), method: method.into(), params, id: Some(Value::from(id)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub jsonrpc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RpcError>,
    pub id: Value,
}

impl Response {
    pub fn ok(id: Value, result: Value) -> Self {
        Self { jsonrpc: "2.0".into(), result: Some(result), error: None, id }
    }

    pub fn err(id: Value, error: RpcError) -> Self {
        Self { jsonrpc: "2.0".into(), result: None, error: Some(error), id }
    }

    pub fn into_result(self) -> Result<Value, RpcError> {
        match (self.result, self.error) {
            (_, Some(e)) => Err(e),
            (Some(v), None) => Ok(v),
            (None, None) => Ok(Value::Null),
        }
    }
}
