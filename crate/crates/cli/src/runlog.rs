//! Append-only JSONL event stream used to prove ordering and test-once claims.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub event: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

pub mod kind {
    pub const RUN_START: &str = "run_start";
    pub const TRAIN_START: &str = "train_start";
    pub const TRAIN_END: &str = "train_end";
    pub const CHECKPOINT_WRITTEN: &str = "checkpoint_written";
    /// `sha256` holds the hash of the sorted test clip ids.
    pub const TEST_READ: &str = "test_read";
    pub const RUN_END: &str = "run_end";
}

pub struct RunLog {
    path: PathBuf,
    file: File,
    next: u64,
}

#[derive(Debug, Default, Clone)]
pub struct Tag {
    pub model: Option<String>,
    pub phase: Option<u8>,
    pub seed: Option<u64>,
}

impl RunLog {
    /// Open for appending; sequence numbers continue from existing events.
    pub fn open(path: &Path) -> Result<Self, CliError> {
        let next = if path.exists() { read_events(path)?.last().map(|e| e.seq + 1).unwrap_or(0) } else { 0 };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RunLog { path: path.to_path_buf(), file, next })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &str, tag: &Tag, artifact: Option<String>, sha256: Option<String>) -> Result<(), CliError> {
        let e = Event {
            seq: self.next,
            event: event.into(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            model: tag.model.clone(),
            phase: tag.phase,
            seed: tag.seed,
            artifact,
            sha256,
        };
        self.next += 1;
        writeln!(self.file, "{}", serde_json::to_string(&e).expect("event json"))?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, CliError> {
    let f = File::open(path)?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| CliError::RunLog(format!("bad event line: {e}")))
        })
        .collect()
}
