use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

use cefa::config::ExperimentConfig;

pub const RECORD_FILE: &str = "run.json";

/// Provenance of one command invocation, written as `run.json` in the
/// command's output directory.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub git_commit: Option<String>,
    pub seed: Option<u64>,
    pub preset: Option<String>,
    /// Model fingerprint of `config` joined with the seed.
    pub fingerprint: Option<String>,
    pub config: Option<ExperimentConfig>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub status: String,
    pub error: Option<String>,
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

impl RunRecord {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_commit: git_commit(),
            seed: None,
            preset: None,
            fingerprint: None,
            config: None,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            status: "running".into(),
            error: None,
            out_dir: PathBuf::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn finish(&mut self, error: Option<String>) {
        self.finished_unix_ms = now_ms();
        self.status = if error.is_some() { "failed" } else { "ok" }.into();
        self.error = error;
        if let Some(cfg) = &self.config {
            self.fingerprint = Some(format!("{}-seed{}", cfg.model_fingerprint(), self.seed.unwrap_or(0)));
        }
    }

    pub fn write(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        write_json(&self.out_dir.join(RECORD_FILE), self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
