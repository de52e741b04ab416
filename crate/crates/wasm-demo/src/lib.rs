//! Browser bindings for the simulation core.
//!
//! Everything crosses the boundary as JSON text. The plain functions do the
//! work and are tested natively; the `#[wasm_bindgen]` items only convert
//! errors.

use mnsm_core::sim::{replay, run_scenario, CoreDriver, EnumerationScript, ScenarioScript, Stimulus, Trace};
use mnsm_core::{Manager, ManagerConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const TRIGGER_FARM: &str = include_str!("../../../demo/trigger-farm.sm");
const FASTMON: &str = include_str!("../../../demo/fastmon.sm");

const SCENARIOS: [(&str, &str); 4] = [
    ("trigger-farm-50", include_str!("../../../demo/scenarios/trigger-farm-50.json")),
    ("fastmon-50", include_str!("../../../demo/scenarios/fastmon-50.json")),
    ("straggler", include_str!("../../../demo/scenarios/straggler.json")),
    ("conflict", include_str!("../../../demo/scenarios/conflict.json")),
];

const ENUMERATIONS: [(&str, &str); 1] = [(
    "interleave-3x3",
    include_str!("../../../demo/enumerations/interleave-3x3.json"),
)];

/// Bundled scenarios with their machine specs inlined, plus enumerations.
pub fn examples() -> Value {
    let scenarios: Vec<Value> = SCENARIOS
        .iter()
        .map(|(name, text)| {
            let mut script = ScenarioScript::from_json(text).expect("bundled scenario parses");
            if let Some(file) = script.machine_file.take() {
                script.machine = Some(match file.rsplit('/').next() {
                    Some("trigger-farm.sm") => TRIGGER_FARM.to_string(),
                    Some("fastmon.sm") => FASTMON.to_string(),
                    _ => panic!("unbundled machine file {file}"),
                });
            }
            json!({ "name": name, "script": script.to_json() })
        })
        .collect();
    let enumerations: Vec<Value> = ENUMERATIONS
        .iter()
        .map(|(name, text)| json!({ "name": name, "script": text }))
        .collect();
    json!({ "scenarios": scenarios, "enumerations": enumerations })
}

fn final_manager(trace: &Trace) -> Manager {
    let mut m = Manager::new(trace.config);
    for r in &trace.records {
        m.ingest(r.event.clone());
    }
    m
}

/// Runs a scenario, optionally with another seed, and checks its replay.
pub fn simulate(script: &str, seed: Option<u64>) -> Result<Value, String> {
    let mut script = ScenarioScript::from_json(script).map_err(|e| e.to_string())?;
    if script.machine_file.is_some() {
        return Err("inline the machine spec as \"machine\"; files cannot be read here".into());
    }
    if let Some(seed) = seed {
        script.seed = seed;
    }
    let trace = run_scenario(&script).map_err(|e| e.to_string())?;
    let replayed = replay(&trace).map_err(|e| e.to_string())?;
    let ndjson = trace.to_ndjson();
    Ok(json!({
        "scenario": trace.scenario,
        "seed": script.seed,
        "published": trace.published(),
        "events": trace.records.len(),
        "ended_at": trace.records.last().map_or(0, |r| r.t),
        "replay_identical": replayed.to_ndjson() == ndjson,
        "snapshot": final_manager(&trace).snapshot(),
        "trace": ndjson,
    }))
}

/// Checks every interleaving of an enumeration script against the oracle.
pub fn interleavings(script: &str) -> Result<Value, String> {
    let script = EnumerationScript::from_json(script).map_err(|e| e.to_string())?;
    script.config.validate().map_err(|e| e.to_string())?;
    let report = script.run().map_err(|e| e.to_string())?;
    let outcomes: Vec<Value> = report
        .outcomes
        .iter()
        .map(|(published, count)| json!({ "published": published, "count": count }))
        .collect();
    let counterexample = report.counterexample.as_ref().map(|c| {
        json!({ "order": c.order, "core": c.core, "oracle": c.oracle })
    });
    Ok(json!({
        "interleavings": report.interleavings,
        "outcomes": outcomes,
        "mismatches": report.mismatches,
        "latch_violations": report.latch_violations,
        "invariant_violations": report.invariant_violations,
        "counterexample": counterexample,
    }))
}

/// A manager driven one stimulus at a time.
#[wasm_bindgen]
pub struct Stepper {
    driver: CoreDriver,
}

impl Stepper {
    pub fn create(config: &str) -> Result<Stepper, String> {
        let config: ManagerConfig = serde_json::from_str(config).map_err(|e| e.to_string())?;
        config.validate().map_err(|e| e.to_string())?;
        Ok(Stepper {
            driver: CoreDriver::new(config),
        })
    }

    /// Applies one stimulus; returns its effects and the resulting snapshot.
    pub fn step(&mut self, stimulus: &str) -> Result<Value, String> {
        let stimulus: Stimulus = serde_json::from_str(stimulus).map_err(|e| e.to_string())?;
        let effects = self.driver.apply(&stimulus).map(<[_]>::to_vec);
        let violation = self.driver.manager().check_invariants().err().map(|v| v.to_string());
        Ok(json!({
            "applied": effects.is_some(),
            "effects": effects.unwrap_or_default(),
            "invariant_violation": violation,
            "snapshot": self.driver.manager().snapshot(),
        }))
    }

    pub fn state(&self) -> Value {
        json!({
            "published": self.driver.published(),
            "snapshot": self.driver.manager().snapshot(),
        })
    }
}

#[wasm_bindgen]
impl Stepper {
    #[wasm_bindgen(constructor)]
    pub fn new(config: &str) -> Result<Stepper, JsError> {
        Stepper::create(config).map_err(|e| JsError::new(&e))
    }

    pub fn apply(&mut self, stimulus: &str) -> Result<String, JsError> {
        self.step(stimulus).map(|v| v.to_string()).map_err(|e| JsError::new(&e))
    }

    pub fn snapshot(&self) -> String {
        self.state().to_string()
    }
}

#[wasm_bindgen(js_name = examples)]
pub fn examples_js() -> String {
    examples().to_string()
}

#[wasm_bindgen(js_name = runScenario)]
pub fn run_scenario_js(script: &str, seed: Option<f64>) -> Result<String, JsError> {
    let seed = seed.map(|s| s.max(0.0) as u64);
    simulate(script, seed).map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = enumerate)]
pub fn enumerate_js(script: &str) -> Result<String, JsError> {
    interleavings(script).map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}
