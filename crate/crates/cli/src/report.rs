use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use poseopt::prune::PruneError;

/// Exit code for a malformed command line.
pub const EXIT_USAGE: u8 = 1;
/// Exit code for invalid input data or a failed stage.
pub const EXIT_DATA: u8 = 2;
/// Exit code when a pruning target cannot be met.
pub const EXIT_UNREACHABLE: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Data { kind: &'static str, message: String },
    Unreachable { best_achievable_speedup: f64, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Data { .. } => EXIT_DATA,
            CliError::Unreachable { .. } => EXIT_UNREACHABLE,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            CliError::Data { kind, message } => json!({
                "error": { "kind": kind, "message": message, "exit_code": EXIT_DATA }
            }),
            CliError::Unreachable {
                best_achievable_speedup,
                message,
            } => json!({
                "error": {
                    "kind": "target_unreachable",
                    "message": message,
                    "exit_code": EXIT_UNREACHABLE,
                    "best_achievable_speedup": best_achievable_speedup,
                }
            }),
        }
    }
}

/// Wraps any displayable error as a data error of the given kind.
pub fn data<E: Display>(kind: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data {
        kind,
        message: e.to_string(),
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::TargetUnreachable { best_achievable_speedup } => CliError::Unreachable {
                best_achievable_speedup,
                message: e.to_string(),
            },
            e => data("prune")(e),
        }
    }
}

#[derive(Serialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct Tool {
    pub name: &'static str,
    pub version: &'static str,
}

/// The JSON document every successful command prints.
#[derive(Serialize)]
pub struct RunReport {
    pub tool: Tool,
    pub command: String,
    pub config: Value,
    pub results: Value,
    pub files: Vec<FileRecord>,
    pub requires_retraining: bool,
    /// Wall-clock seconds per stage. Everything outside this object is
    /// reproducible byte for byte.
    pub timings: BTreeMap<String, f64>,
}

/// What a command hands back to the driver.
pub struct Outcome {
    pub config: Value,
    pub results: Value,
    pub requires_retraining: bool,
    /// One line for humans, printed to stderr.
    pub summary: String,
}

/// Per-run bookkeeping: files read and written, stage timings.
pub struct Ctx {
    inputs: Vec<PathBuf>,
    files: Vec<FileRecord>,
    timings: BTreeMap<String, f64>,
    start: Instant,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Ctx {
    pub fn new() -> Ctx {
        Ctx {
            inputs: Vec::new(),
            files: Vec::new(),
            timings: BTreeMap::new(),
            start: Instant::now(),
        }
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Data {
            kind: "io",
            message: format!("{}: {e}", path.display()),
        })?;
        if let Ok(p) = path.canonicalize() {
            self.inputs.push(p);
        }
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.read(path)?).map_err(|_| CliError::Data {
            kind: "io",
            message: format!("{}: not UTF-8 text", path.display()),
        })
    }

    /// Marks a directory's files as inputs so no output lands on them.
    pub fn note_input_dir(&mut self, dir: &Path) {
        if let Ok(entries) = fs::read_dir(dir) {
            for e in entries.flatten() {
                if let Ok(p) = e.path().canonicalize() {
                    self.inputs.push(p);
                }
            }
        }
    }

    fn guard(&self, path: &Path) -> Result<(), CliError> {
        if let Ok(p) = path.canonicalize() {
            if self.inputs.contains(&p) {
                return Err(CliError::Data {
                    kind: "io",
                    message: format!("refusing to overwrite input file {}", path.display()),
                });
            }
        }
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        self.guard(path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::Data {
                kind: "io",
                message: format!("{}: {e}", dir.display()),
            })?;
        }
        fs::write(path, bytes).map_err(|e| CliError::Data {
            kind: "io",
            message: format!("{}: {e}", path.display()),
        })?;
        self.files.push(FileRecord {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, path: &Path, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    /// Records a file written by library code.
    pub fn record(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Data {
            kind: "io",
            message: format!("{}: {e}", path.display()),
        })?;
        self.files.push(FileRecord {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.timings.entry(format!("{stage}_seconds")).or_default() += t.elapsed().as_secs_f64();
        out
    }

    pub fn finish(mut self, command: &str, outcome: Outcome) -> RunReport {
        self.timings.insert("total_seconds".into(), self.start.elapsed().as_secs_f64());
        RunReport {
            tool: Tool {
                name: "poseopt",
                version: env!("CARGO_PKG_VERSION"),
            },
            command: command.to_string(),
            config: outcome.config,
            results: outcome.results,
            files: self.files,
            requires_retraining: outcome.requires_retraining,
            timings: self.timings,
        }
    }
}
