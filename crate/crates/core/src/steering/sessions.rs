//! Flat-file credentials and expiring session tokens.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::SteeringError;
use crate::model::VirtualTime;

pub const DEFAULT_SESSION_TTL: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Admin,
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "user" => Ok(Role::User),
            "admin" => Ok(Role::Admin),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub user: String,
    pub role: Role,
    pub expires_at: VirtualTime,
}

impl Session {
    pub fn may_steer(&self, owner: &str) -> bool {
        self.role == Role::Admin || self.user == owner
    }
}

#[derive(Debug, Clone)]
struct Credential {
    password: String,
    role: Role,
}

#[derive(Debug, Clone)]
pub struct SessionManager {
    users: BTreeMap<String, Credential>,
    sessions: BTreeMap<String, Session>,
    ttl: f64,
}

impl Default for SessionManager {
    fn default() -> Self {
        Self { users: BTreeMap::new(), sessions: BTreeMap::new(), ttl: DEFAULT_SESSION_TTL }
    }
}

impl SessionManager {
    /// Parse `user:password:role` lines; blank lines and `#` comments are
    /// ignored.
    pub fn parse_credentials(text: &str) -> Result<Self, String> {
        let mut m = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, ':').collect();
            let [user, password, role] = parts[..] else {
                return Err(format!("line {}: expected user:password:role", i + 1));
            };
            let role = role.parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            m.add_user(user, password, role);
        }
        Ok(m)
    }

    pub fn add_user(&mut self, user: &str, password: &str, role: Role) {
        self.users.insert(user.to_string(), Credential { password: password.to_string(), role });
    }

    pub fn set_ttl(&mut self, ttl: f64) {
        self.ttl = ttl;
    }

    pub fn ttl(&self) -> f64 {
        self.ttl
    }

    pub fn login(&mut self, user: &str, password: &str, now: VirtualTime) -> Result<Session, SteeringError> {
        let cred = self.users.get(user).filter(|c| c.password == password).ok_or(SteeringError::BadCredentials)?;
        let session = Session {
            session_id: Uuid::new_v4().to_string(),
            user: user.to_string(),
            role: cred.role,
            expires_at: now + self.ttl,
        };
        self.sessions.insert(session.session_id.clone(), session.clone());
        Ok(session)
    }

    pub fn logout(&mut self, session_id: &str) -> Result<(), SteeringError> {
        self.sessions.remove(session_id).map(|_| ()).ok_or(SteeringError::SessionExpired)
    }

    /// The live session for a token. Unknown, logged-out and expired tokens
    /// all read as expired.
    pub fn validate(&self, session_id: Option<&str>, now: VirtualTime) -> Result<&Session, SteeringError> {
        let Some(id) = session_id else { return Err(SteeringError::Unauthorized) };
        match self.sessions.get(id) {
            Some(s) if now < s.expires_at => Ok(s),
            _ => Err(SteeringError::SessionExpired),
        }
    }
}
