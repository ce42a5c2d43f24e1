use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;

/// Record of one run, written as JSON next to its outputs.
#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    tool_version: &'a str,
    config: &'a serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_at: String,
    wall_time_s: f64,
}

pub struct Manifest {
    subcommand: &'static str,
    config: serde_json::Value,
    started_at: String,
    clock: Instant,
}

impl Manifest {
    pub fn start(subcommand: &'static str, config: &impl Serialize) -> Self {
        Self {
            subcommand,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            started_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            clock: Instant::now(),
        }
    }

    pub fn finish(self, path: PathBuf, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        let show = |ps: &[&Path]| ps.iter().map(|p| p.display().to_string()).collect();
        let manifest = RunManifest {
            subcommand: self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: &self.config,
            inputs: show(inputs),
            outputs: show(outputs),
            started_at: self.started_at,
            wall_time_s: self.clock.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }
}
