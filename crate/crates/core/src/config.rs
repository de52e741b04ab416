use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Manager tuning knobs, editable at runtime from the operator API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerConfig {
    /// START fails into ERROR with fewer available nodes than this.
    pub min_nodes: u32,
    /// START activates at most this many nodes.
    pub max_nodes: u32,
    /// Counted errors tolerated per epoch; one more enters ERROR.
    pub max_errors: u32,
    /// Bound on commands and spontaneous transitions, in milliseconds
    /// (one millisecond is one tick of virtual time in simulation).
    pub timeout_ms: u64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            min_nodes: 1,
            max_nodes: 64,
            max_errors: 0,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub fields: Vec<FieldError>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .fields
            .iter()
            .map(|e| format!("{}: {}", e.field, e.reason))
            .collect();
        write!(f, "invalid configuration ({})", parts.join("; "))
    }
}

impl ManagerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut fields = Vec::new();
        if self.min_nodes == 0 {
            fields.push(FieldError {
                field: "min_nodes",
                reason: "must be at least 1".into(),
            });
        }
        if self.max_nodes < self.min_nodes {
            fields.push(FieldError {
                field: "max_nodes",
                reason: format!("must be >= min_nodes ({})", self.min_nodes),
            });
        }
        if self.timeout_ms == 0 {
            fields.push(FieldError {
                field: "timeout_ms",
                reason: "must be positive".into(),
            });
        }
        if fields.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { fields })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_sane_values() {
        let cfg = ManagerConfig {
            min_nodes: 5,
            max_nodes: 10,
            max_errors: 2,
            timeout_ms: 30_000,
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_min_above_max_and_zero_timeout() {
        let cfg = ManagerConfig {
            min_nodes: 10,
            max_nodes: 5,
            max_errors: 0,
            timeout_ms: 0,
        };
        let err = cfg.validate().unwrap_err();
        let fields: Vec<&str> = err.fields.iter().map(|f| f.field).collect();
        assert_eq!(fields, vec!["max_nodes", "timeout_ms"]);
    }
}
