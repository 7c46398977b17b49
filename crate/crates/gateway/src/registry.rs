//! In-process service registry: who serves which methods, and where.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::protocol::{RpcError, DUPLICATE_SERVICE, UNKNOWN_SERVICE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("service `{0}` is already registered")]
    DuplicateService(String),
    #[error("no service named `{0}`")]
    UnknownService(String),
}

impl From<RegistryError> for RpcError {
    fn from(e: RegistryError) -> Self {
        let code = match e {
            RegistryError::DuplicateService(_) => DUPLICATE_SERVICE,
            RegistryError::UnknownService(_) => UNKNOWN_SERVICE,
        };
        RpcError::new(code, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceDescriptor {
    pub name: String,
    /// Method names without the service prefix.
    pub methods: Vec<String>,
    pub endpoint: String,
}

impl ServiceDescriptor {
    pub fn has_method(&self, method: &str) -> bool {
        self.methods.iter().any(|m| m == method)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    endpoint: String,
    services: BTreeMap<String, ServiceDescriptor>,
}

impl Registry {
    /// An empty registry whose services answer at `endpoint`.
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), services: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, methods: &[&str]) -> Result<&ServiceDescriptor, RegistryError> {
        if self.services.contains_key(name) {
            return Err(RegistryError::DuplicateService(name.to_string()));
        }
        let d = ServiceDescriptor {
            name: name.to_string(),
            methods: methods.iter().map(|m| m.to_string()).collect(),
            endpoint: self.endpoint.clone(),
        };
        Ok(self.services.entry(name.to_string()).or_insert(d))
    }

    pub fn lookup(&self, name: &str) -> Result<&ServiceDescriptor, RegistryError> {
        self.services.get(name).ok_or_else(|| RegistryError::UnknownService(name.to_string()))
    }

    pub fn list(&self) -> Vec<&ServiceDescriptor> {
        self.services.values().collect()
    }

    pub fn set_endpoint(&mut self, endpoint: impl Into<String>) {
        self.endpoint = endpoint.into();
        for d in self.services.values_mut() {
            d.endpoint = self.endpoint.clone();
        }
    }

    /// Split `service.method` and check both halves are registered.
    pub fn resolve<'m>(&self, full: &'m str) -> Option<(&'m str, &'m str)> {
        let (service, method) = full.split_once('.')?;
        self.services.get(service).filter(|d| d.has_method(method)).map(|_| (service, method))
    }
}
