use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

/// Record of one invocation, written beside its artifacts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub error: Option<String>,
    pub artifacts: Vec<PathBuf>,
    pub details: Value,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(subcommand: &str, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            args: std::env::args().collect(),
            seed,
            started: now(),
            finished: None,
            status: "running".into(),
            error: None,
            artifacts: Vec::new(),
            details: Value::Null,
        }
    }

    pub fn finish(&mut self, outcome: &Result<(), String>) {
        self.finished = Some(now());
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(e.clone());
            }
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n")
    }
}

/// `<file>.<suffix>` next to `file`.
pub fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    file.with_file_name(name)
}
