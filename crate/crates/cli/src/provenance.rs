use std::path::Path;
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    /// The config after command-line overrides, as TOML.
    pub effective_config: Option<String>,
    pub seed: Option<u64>,
    pub git_revision: Option<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub extra: serde_json::Value,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn git_revision(dir: &Path) -> Option<String> {
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    let out = Command::new("git").arg("-C").arg(dir).args(["rev-parse", "HEAD"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let rev = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!rev.is_empty()).then_some(rev)
}

impl RunRecord {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(self).expect("run record serializes");
        std::fs::write(&path, text + "\n").map_err(|e| ogan_core::Error::io(&path, e).into())
    }
}
