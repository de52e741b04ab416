use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::registry::{ServiceKind, ServiceRecord};
use crate::machine::StateClass;

/// Payload of a wire message. The `type` tag on the wire selects the variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Body {
    /// Registry registration, also sent first on a peer session to identify the sender.
    Register {
        name: String,
        kind: ServiceKind,
        address: String,
    },
    Lookup {
        name: String,
    },
    LookupReply {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        record: Option<ServiceRecord>,
    },
    List {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kind: Option<ServiceKind>,
    },
    ListReply {
        records: Vec<ServiceRecord>,
    },
    Command {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
    },
    StateReport {
        state: String,
        class: StateClass,
        color: String,
        #[serde(default)]
        detail: String,
    },
    Heartbeat,
    Bye,
    LogRequest {
        request: u64,
        lines: u32,
    },
    LogReply {
        request: u64,
        text: String,
    },
}

impl Body {
    pub fn type_name(&self) -> &'static str {
        match self {
            Body::Register { .. } => "REGISTER",
            Body::Lookup { .. } => "LOOKUP",
            Body::LookupReply { .. } => "LOOKUP_REPLY",
            Body::List { .. } => "LIST",
            Body::ListReply { .. } => "LIST_REPLY",
            Body::Command { .. } => "COMMAND",
            Body::StateReport { .. } => "STATE_REPORT",
            Body::Heartbeat => "HEARTBEAT",
            Body::Bye => "BYE",
            Body::LogRequest { .. } => "LOG_REQUEST",
            Body::LogReply { .. } => "LOG_REPLY",
        }
    }
}

/// (type, all payload fields, required payload fields)
const SCHEMA: &[(&str, &[&str], &[&str])] = &[
    ("REGISTER", &["name", "kind", "address"], &["name", "kind", "address"]),
    ("LOOKUP", &["name"], &["name"]),
    ("LOOKUP_REPLY", &["name", "record"], &["name"]),
    ("LIST", &["kind"], &[]),
    ("LIST_REPLY", &["records"], &["records"]),
    ("COMMAND", &["name", "target"], &["name"]),
    ("STATE_REPORT", &["state", "class", "color", "detail"], &["state", "class", "color"]),
    ("HEARTBEAT", &[], &[]),
    ("BYE", &[], &[]),
    ("LOG_REQUEST", &["request", "lines"], &["request", "lines"]),
    ("LOG_REPLY", &["request", "text"], &["request", "text"]),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub sender: String,
    pub seq: u64,
    pub body: Body,
    /// Fields this version does not know; carried along untouched.
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("bad value for field `{field}`: {reason}")]
    BadField { field: String, reason: String },
}

impl WireMessage {
    pub fn new(sender: impl Into<String>, seq: u64, body: Body) -> Self {
        WireMessage {
            sender: sender.into(),
            seq,
            body,
            extra: Map::new(),
        }
    }

    /// Single-line JSON object, without the trailing newline.
    pub fn encode(&self) -> String {
        let Value::Object(body) = serde_json::to_value(&self.body).expect("body serializes") else {
            unreachable!("internally tagged enums serialize to objects")
        };
        let mut out = Map::new();
        out.insert("type".into(), Value::String(self.body.type_name().into()));
        out.insert("sender".into(), Value::String(self.sender.clone()));
        out.insert("seq".into(), Value::from(self.seq));
        for (k, v) in body {
            if k != "type" {
                out.insert(k, v);
            }
        }
        for (k, v) in &self.extra {
            if !out.contains_key(k) {
                out.insert(k.clone(), v.clone());
            }
        }
        Value::Object(out).to_string()
    }

    pub fn decode(line: &str) -> Result<Self, WireError> {
        let value: Value = serde_json::from_str(line.trim_end_matches(['\r', '\n']))
            .map_err(|e| WireError::MalformedFrame(e.to_string()))?;
        let Value::Object(mut map) = value else {
            return Err(WireError::MalformedFrame("frame is not an object".into()));
        };
        let ty = match map.get("type") {
            None => return Err(WireError::MissingField("type".into())),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(bad("type", "not a string")),
        };
        let (_, fields, required) = SCHEMA
            .iter()
            .find(|(name, _, _)| *name == ty)
            .ok_or_else(|| WireError::UnknownType(ty.clone()))?;
        let sender = match map.remove("sender") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(bad("sender", "not a string")),
            None => return Err(WireError::MissingField("sender".into())),
        };
        let seq = match map.remove("seq") {
            Some(v) => v.as_u64().ok_or_else(|| bad("seq", "not a non-negative integer"))?,
            None => return Err(WireError::MissingField("seq".into())),
        };
        for field in *required {
            if !map.contains_key(*field) {
                return Err(WireError::MissingField((*field).into()));
            }
        }
        let mut known = Map::new();
        known.insert("type".into(), map.remove("type").expect("checked"));
        for field in *fields {
            if let Some(v) = map.remove(*field) {
                if v.is_null() {
                    continue;
                }
                known.insert((*field).into(), v);
            }
        }
        let body: Body = serde_json::from_value(Value::Object(known))
            .map_err(|e| bad(&ty, &e.to_string()))?;
        Ok(WireMessage {
            sender,
            seq,
            body,
            extra: map,
        })
    }
}

fn bad(field: &str, reason: &str) -> WireError {
    WireError::BadField {
        field: field.into(),
        reason: reason.into(),
    }
}
