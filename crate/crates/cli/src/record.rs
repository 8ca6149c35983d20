//! Run records: one JSON document per command invocation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Serialize)]
pub struct RunRecord {
    pub command: &'static str,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
    /// sha256 of every output, keyed like `outputs`.
    pub checksums: BTreeMap<String, String>,
    pub errors: Vec<String>,
}

/// Collects outputs while a command runs and writes the record at the end.
pub struct Recorder {
    command: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<(String, String)>,
    errors: Vec<String>,
    started: Instant,
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Recorder {
    pub fn new<C: Serialize>(command: &'static str, config: &C, seeds: Vec<u64>) -> Self {
        Self {
            command,
            config: serde_json::to_value(config).expect("arguments serialize"),
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            errors: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(display(path));
    }

    pub fn error(&mut self, message: String) {
        self.errors.push(message);
    }

    /// Writes `bytes` to `path` (creating parent directories) and records it.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        write_file(path, bytes)?;
        self.outputs.push((display(path), sha256_hex(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(proalign::Error::from)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    pub fn finish(self, record_path: &Path) -> CliResult<()> {
        let record = RunRecord {
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|(p, _)| p.clone()).collect(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
            checksums: self.outputs.into_iter().collect(),
            errors: self.errors,
        };
        let mut text = serde_json::to_string_pretty(&record).map_err(proalign::Error::from)?;
        text.push('\n');
        write_file(record_path, text.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| proalign::Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Core(proalign::Error::io(path, e)))
}

/// `<dir>/run-<command>.json` for commands that write a directory.
pub fn dir_record_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("run-{command}.json"))
}

/// `<stem>.run.json` next to a single output file.
pub fn file_record_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.run.json"))
}
