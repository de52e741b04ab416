use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{published, Effect, Manager, ManagerEvent};
use crate::config::ManagerConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Virtual time in ticks.
    pub t: u64,
    pub event: ManagerEvent,
    pub effects: Vec<Effect>,
}

/// Everything the core saw and said during one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub scenario: String,
    pub config: ManagerConfig,
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header {
        scenario: String,
        config: ManagerConfig,
    },
    Record(TraceRecord),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trace has no header line")]
    MissingHeader,
    #[error("line {0}: unexpected second header")]
    DuplicateHeader(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayMismatch {
    #[error("record {index}: time went backwards ({previous} -> {now})")]
    TimeReversed { index: usize, previous: u64, now: u64 },
    #[error("record {index}: effects differ on replay")]
    Effects {
        index: usize,
        recorded: Vec<Effect>,
        replayed: Vec<Effect>,
    },
}

impl Trace {
    pub fn published(&self) -> Vec<String> {
        self.records.iter().flat_map(|r| published(&r.effects)).collect()
    }

    pub fn events(&self) -> impl Iterator<Item = &ManagerEvent> {
        self.records.iter().map(|r| &r.event)
    }

    /// Newline-delimited JSON: a header line, then one line per record.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let header = Line::Header {
            scenario: self.scenario.clone(),
            config: self.config,
        };
        out.push_str(&serde_json::to_string(&header).expect("trace serializes"));
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Record(r.clone())).expect("trace serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Trace, TraceError> {
        let mut header = None;
        let mut records = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|source| TraceError::Parse {
                line: idx + 1,
                source,
            })?;
            match line {
                Line::Header { scenario, config } => {
                    if header.is_some() {
                        return Err(TraceError::DuplicateHeader(idx + 1));
                    }
                    header = Some((scenario, config));
                }
                Line::Record(r) => records.push(r),
            }
        }
        let (scenario, config) = header.ok_or(TraceError::MissingHeader)?;
        Ok(Trace {
            scenario,
            config,
            records,
        })
    }
}

/// Feeds the recorded events to a fresh core and checks it says the same.
pub fn replay(trace: &Trace) -> Result<Trace, ReplayMismatch> {
    let mut manager = Manager::new(trace.config);
    let mut records = Vec::with_capacity(trace.records.len());
    let mut previous = 0;
    for (index, record) in trace.records.iter().enumerate() {
        if record.t < previous {
            return Err(ReplayMismatch::TimeReversed {
                index,
                previous,
                now: record.t,
            });
        }
        previous = record.t;
        let effects = manager.ingest(record.event.clone());
        if effects != record.effects {
            return Err(ReplayMismatch::Effects {
                index,
                recorded: record.effects.clone(),
                replayed: effects,
            });
        }
        records.push(TraceRecord {
            t: record.t,
            event: record.event.clone(),
            effects,
        });
    }
    Ok(Trace {
        scenario: trace.scenario.clone(),
        config: trace.config,
        records,
    })
}
