//! Operator client and experiment harness.

pub mod jobfile;
pub mod load;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Anything not covered below, including application errors returned
    /// by the gateway.
    pub const FAILURE: i32 = 1;
    pub const CONNECTION: i32 = 2;
    pub const PARSE: i32 = 3;
    pub const SELF_CHECK: i32 = 4;
}

pub const DEFAULT_GATEWAY: &str = "http://127.0.0.1:7878/rpc";

/// An error on its way to becoming an exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Fail {
    pub code: i32,
    pub message: String,
}

impl Fail {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<gridhelm_gateway::ClientError> for Fail {
    fn from(e: gridhelm_gateway::ClientError) -> Self {
        let code = match e {
            gridhelm_gateway::ClientError::Connection(_) => exit::CONNECTION,
            _ => exit::FAILURE,
        };
        Fail::new(code, e.to_string())
    }
}

impl From<jobfile::ParseFailure> for Fail {
    fn from(e: jobfile::ParseFailure) -> Self {
        Fail::new(exit::PARSE, e.to_string())
    }
}
