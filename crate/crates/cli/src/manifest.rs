//! One JSON manifest per run: what ran, with which configuration, and what
//! it produced.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use vimd::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    /// Canonical `key = value` text; feeding it back through `--config`
    /// reproduces the run.
    pub config_text: Option<String>,
    pub config: Option<RunConfig>,
    pub started_unix: u64,
    pub timings: Vec<Timing>,
    pub outputs: Vec<PathBuf>,
    pub result: serde_json::Value,
    #[serde(skip)]
    clock: Option<Instant>,
}

/// `v<crate version>`, with the commit appended when the build recorded one.
pub fn version_string() -> String {
    match option_env!("VIMD_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&RunConfig>) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            version: version_string(),
            seed: config.map(|c| c.train.seed),
            config_text: config.map(RunConfig::to_text),
            config: config.cloned(),
            started_unix,
            timings: Vec::new(),
            outputs: Vec::new(),
            result: serde_json::Value::Null,
            clock: Some(Instant::now()),
        }
    }

    /// Records the time since the previous call (or since creation).
    pub fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        let start = self.clock.replace(now).unwrap_or(now);
        self.timings.push(Timing {
            phase: phase.to_string(),
            seconds: (now - start).as_secs_f64(),
        });
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(mut self, path: &Path) -> vimd::Result<()> {
        self.outputs.push(path.to_path_buf());
        let json = serde_json::to_vec_pretty(&self)
            .map_err(|e| vimd::Error::Config(format!("manifest serialization: {e}")))?;
        vimd::checkpoint::write_file(path, &json)
    }
}
