//! Output directory of one invocation and its `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::Failure;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub exit_code: i32,
    pub status: String,
    pub config: Value,
    pub files: Vec<String>,
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    started: u64,
    files: Vec<String>,
    config: Value,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunDir {
    /// Uses `exact` if given, otherwise a fresh `<command>-<n>` under `root`.
    pub fn create(root: &Path, exact: Option<&Path>, command: &str) -> Result<RunDir, Failure> {
        let path = match exact {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = now();
                let mut n = 0;
                loop {
                    let p = root.join(format!("{command}-{stamp}-{n}"));
                    if !p.exists() {
                        break p;
                    }
                    n += 1;
                }
            }
        };
        fs::create_dir_all(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        Ok(RunDir {
            path,
            command: command.into(),
            started: now(),
            files: Vec::new(),
            config: Value::Null,
        })
    }

    pub fn set_config<T: Serialize>(&mut self, cfg: &T) {
        self.config = serde_json::to_value(cfg).unwrap_or(Value::Null);
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        let p = self.path.join(name);
        fs::write(&p, contents).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
        self.files.push(name.into());
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    /// Records a file written by someone else (e.g. a dataset directory).
    pub fn note(&mut self, name: &str) {
        self.files.push(name.into());
    }

    pub fn finish(self, exit_code: i32, status: &str) -> Result<(), Failure> {
        let m = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started,
            finished_unix: now(),
            exit_code,
            status: status.into(),
            config: self.config,
            files: self.files,
        };
        let p = self.path.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&m).map_err(|e| Failure::Io(e.to_string()))?;
        fs::write(&p, text + "\n").map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
    }
}
