use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

use crate::lines::{create, file_digest, write_json_line};

/// Written next to every run's output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: Value,
    pub workers: usize,
    /// SHA-256 per input path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 per output path.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub duration_seconds: f64,
}

pub struct Run {
    command: &'static str,
    flags: Value,
    inputs: Vec<PathBuf>,
    started: Instant,
}

impl Run {
    pub fn start(command: &'static str, flags: &impl Serialize) -> Self {
        Self {
            command,
            flags: serde_json::to_value(flags).unwrap_or(Value::Null),
            inputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn finish(self, outputs: &[&Path], manifest: &Path) -> Result<()> {
        let digests = |paths: &mut dyn Iterator<Item = &Path>| -> Result<BTreeMap<String, String>> {
            paths
                .map(|p| Ok((p.display().to_string(), file_digest(p)?)))
                .collect()
        };
        let m = RunManifest {
            command: self.command.to_string(),
            flags: self.flags,
            workers: rayon::current_num_threads(),
            inputs: digests(&mut self.inputs.iter().map(PathBuf::as_path))?,
            outputs: digests(&mut outputs.iter().copied())?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut w = create(manifest)?;
        write_json_line(&mut w, &m)?;
        w.flush()?;
        Ok(())
    }
}
