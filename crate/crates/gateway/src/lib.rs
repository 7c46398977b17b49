//! JSON-RPC gateway over the grid services, with an in-process service
//! registry.

pub mod client;
pub mod protocol;
pub mod registry;
pub mod server;
pub mod service;

pub use client::{Client, ClientError};
pub use protocol::{RpcError, GATEWAY_CODES};
pub use registry::{Registry, RegistryError, ServiceDescriptor};
pub use server::{router, spawn, Running, ServerConfig};
pub use service::{Gateway, SubscribeBatch, SERVICES};
