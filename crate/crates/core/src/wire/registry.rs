use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Manager,
    Daemon,
    Controller,
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceKind::Manager => "manager",
            ServiceKind::Daemon => "daemon",
            ServiceKind::Controller => "controller",
        })
    }
}

impl FromStr for ServiceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "manager" => Ok(ServiceKind::Manager),
            "daemon" => Ok(ServiceKind::Daemon),
            "controller" => Ok(ServiceKind::Controller),
            other => Err(format!("unknown service kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub name: String,
    pub kind: ServiceKind,
    /// `host:port`
    pub address: String,
    /// Unix milliseconds.
    pub registered_at: u64,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("malformed service name `{0}`")]
    MalformedName(String),
}

pub fn valid_service_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// The name table. One record per name; re-registration replaces the record
/// and bumps its generation, which survives removal.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    records: BTreeMap<String, ServiceRecord>,
    generations: HashMap<String, u64>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        kind: ServiceKind,
        address: &str,
        now_ms: u64,
    ) -> Result<ServiceRecord, RegistryError> {
        if !valid_service_name(name) {
            return Err(RegistryError::MalformedName(name.to_string()));
        }
        let generation = self.generations.entry(name.to_string()).or_insert(0);
        *generation += 1;
        let record = ServiceRecord {
            name: name.to_string(),
            kind,
            address: address.to_string(),
            registered_at: now_ms,
            generation: *generation,
        };
        self.records.insert(name.to_string(), record.clone());
        Ok(record)
    }

    pub fn lookup(&self, name: &str) -> Option<&ServiceRecord> {
        self.records.get(name)
    }

    pub fn list(&self, kind: Option<ServiceKind>) -> Vec<ServiceRecord> {
        self.records
            .values()
            .filter(|r| kind.map_or(true, |k| r.kind == k))
            .cloned()
            .collect()
    }

    /// Removes `name` only if it is still at `generation`, so a dying old
    /// session cannot evict its own replacement.
    pub fn remove(&mut self, name: &str, generation: u64) -> bool {
        if self.records.get(name).is_some_and(|r| r.generation == generation) {
            self.records.remove(name);
            true
        } else {
            false
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
