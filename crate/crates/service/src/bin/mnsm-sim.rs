//! Deterministic simulation: run scenarios, enumerate interleavings, replay traces.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mnsm_core::sim::{replay, EnumerationScript, ScenarioScript, Trace};

#[derive(Parser)]
#[command(version, about = "Deterministic simulation harness")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario under virtual time and print the published aggregates.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace (NDJSON) here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Check every interleaving of an enumeration file against the oracle.
    Enumerate { file: PathBuf },
    /// Re-run a trace through a fresh core and compare effects byte for byte.
    Replay { trace: PathBuf },
}

fn main() -> anyhow::Result<ExitCode> {
    match Args::parse().cmd {
        Cmd::Run { file, seed, trace } => {
            let mut script = ScenarioScript::load(&file)?;
            if let Some(seed) = seed {
                script.seed = seed;
            }
            let out = mnsm_core::sim::run_scenario(&script)?;
            if let Some(path) = trace {
                std::fs::write(&path, out.to_ndjson()).with_context(|| format!("writing {}", path.display()))?;
            }
            let published = out.published();
            let end = out.records.last().map_or(0, |r| r.t);
            println!("scenario {}: {} events, ended at t={end}", script.name, out.records.len());
            println!("published {}", published.join(" "));
        }
        Cmd::Enumerate { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let script = EnumerationScript::from_json(&text)?;
            let report = script.run()?;
            println!("interleavings {}", report.interleavings);
            for (outcome, n) in &report.outcomes {
                println!("  {n:>6} x [{}]", outcome.join(", "));
            }
            println!("mismatches {}", report.mismatches);
            println!("latch violations {}", report.latch_violations);
            for v in &report.invariant_violations {
                println!("invariant: {v}");
            }
            if let Some(c) = &report.counterexample {
                println!("counterexample order: {:?}", c.order);
                println!("  core   {:?}", c.core);
                println!("  oracle {:?}", c.oracle);
            }
            if !report.all_agree() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Replay { trace } => {
            let text = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let recorded = Trace::from_ndjson(&text)?;
            match replay(&recorded) {
                Ok(again) if again.to_ndjson() == text => {
                    println!("replayed {} records: identical", recorded.records.len());
                }
                Ok(_) => {
                    println!("replay matched effects but the file is not byte-identical");
                    return Ok(ExitCode::FAILURE);
                }
                Err(e) => {
                    println!("replay diverged: {e}");
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
