//! Exhaustive interleaving checks at small scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{Effect, ManagerEvent, ERROR, RESET};
use crate::config::ManagerConfig;

use super::{CoreDriver, Oracle, Stimulus};

/// One source of stimuli whose internal order is fixed.
pub type Lane = Vec<Stimulus>;

pub const EXPLOSION_GUARD: u128 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnumerationError {
    #[error("{count} interleavings exceed the guard of {limit}")]
    ExplosionGuard { count: u128, limit: u128 },
}

#[derive(Debug, Clone)]
pub struct Counterexample {
    pub order: Vec<Stimulus>,
    pub core: Vec<String>,
    pub oracle: Vec<String>,
    pub trace: Vec<(ManagerEvent, Vec<Effect>)>,
}

#[derive(Debug, Clone, Default)]
pub struct EnumerationReport {
    pub interleavings: usize,
    /// Published aggregate sequence -> number of interleavings producing it.
    pub outcomes: BTreeMap<Vec<String>, usize>,
    pub mismatches: usize,
    pub counterexample: Option<Counterexample>,
    /// Interleavings in which a command left the manager between ERROR and RESET.
    pub latch_violations: usize,
    pub invariant_violations: Vec<String>,
}

impl EnumerationReport {
    pub fn all_agree(&self) -> bool {
        self.mismatches == 0 && self.invariant_violations.is_empty()
    }
}

/// File form of an enumeration: a fixed prefix, lanes to interleave and a
/// fixed suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumerationScript {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub config: ManagerConfig,
    #[serde(default)]
    pub prefix: Vec<Stimulus>,
    pub lanes: Vec<Lane>,
    #[serde(default)]
    pub suffix: Vec<Stimulus>,
}

impl EnumerationScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn run(&self) -> Result<EnumerationReport, EnumerationError> {
        enumerate(self.config, &self.prefix, &self.lanes, &self.suffix)
    }
}

/// Number of distinct merges of lanes with the given lengths.
pub fn interleaving_count(lengths: &[usize]) -> u128 {
    let mut total: u128 = 1;
    let mut placed: u128 = 0;
    for &len in lengths {
        for i in 1..=len as u128 {
            placed += 1;
            total = total.saturating_mul(placed) / i;
        }
    }
    total
}

/// Calls `visit` with every order-preserving merge of `lanes`.
pub fn for_each_interleaving(lanes: &[Lane], mut visit: impl FnMut(&[Stimulus])) {
    let total: usize = lanes.iter().map(Vec::len).sum();
    let mut cursor = vec![0usize; lanes.len()];
    let mut out = Vec::with_capacity(total);
    fn go(
        lanes: &[Lane],
        cursor: &mut [usize],
        out: &mut Vec<Stimulus>,
        total: usize,
        visit: &mut dyn FnMut(&[Stimulus]),
    ) {
        if out.len() == total {
            visit(out);
            return;
        }
        for lane in 0..lanes.len() {
            if cursor[lane] < lanes[lane].len() {
                out.push(lanes[lane][cursor[lane]].clone());
                cursor[lane] += 1;
                go(lanes, cursor, out, total, visit);
                cursor[lane] -= 1;
                out.pop();
            }
        }
    }
    go(lanes, &mut cursor, &mut out, total, &mut visit);
}

/// Runs `prefix`, then every interleaving of `lanes`, then `suffix` through
/// both the core and the oracle, comparing published aggregates.
pub fn enumerate(
    config: ManagerConfig,
    prefix: &[Stimulus],
    lanes: &[Lane],
    suffix: &[Stimulus],
) -> Result<EnumerationReport, EnumerationError> {
    let lengths: Vec<usize> = lanes.iter().map(Vec::len).collect();
    let count = interleaving_count(&lengths);
    if count > EXPLOSION_GUARD {
        return Err(EnumerationError::ExplosionGuard {
            count,
            limit: EXPLOSION_GUARD,
        });
    }
    let mut report = EnumerationReport::default();
    for_each_interleaving(lanes, |merged| {
        let order: Vec<Stimulus> = prefix
            .iter()
            .chain(merged)
            .chain(suffix)
            .cloned()
            .collect();
        let mut driver = CoreDriver::new(config);
        for s in &order {
            driver.apply(s);
            if let Err(v) = driver.manager().check_invariants() {
                if report.invariant_violations.len() < 10 {
                    report.invariant_violations.push(format!("{v} after {s:?}"));
                }
            }
        }
        let core = driver.published();
        let oracle = Oracle::expected(config, &order);
        report.interleavings += 1;
        *report.outcomes.entry(core.clone()).or_default() += 1;
        if latch_broken(driver.events()) {
            report.latch_violations += 1;
        }
        if core != oracle {
            report.mismatches += 1;
            if report.counterexample.is_none() {
                report.counterexample = Some(Counterexample {
                    order,
                    core,
                    oracle,
                    trace: driver.events().to_vec(),
                });
            }
        }
    });
    Ok(report)
}

/// True if a send follows a published ERROR without an intervening RESET.
pub fn latch_broken(events: &[(ManagerEvent, Vec<Effect>)]) -> bool {
    let mut latched = false;
    for (event, effects) in events {
        if matches!(event, ManagerEvent::ControllerCommand { name } if name == RESET) {
            latched = false;
        }
        for effect in effects {
            match effect {
                Effect::PublishAggregate { state } if state == ERROR => latched = true,
                Effect::SendToNode { .. } | Effect::SendToAll { .. } if latched => return true,
                _ => {}
            }
        }
    }
    false
}
