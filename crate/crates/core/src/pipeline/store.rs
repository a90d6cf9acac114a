//! Run-directory files: append-only JSONL with crash tolerance, and a small
//! checkpoint document.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;

pub const TASKS: &str = "tasks.jsonl";
pub const TRIPLETS: &str = "triplets.jsonl";
pub const RAW: &str = "trajectories_raw.jsonl";
pub const REFINED: &str = "trajectories_refined.jsonl";
pub const DROPS: &str = "drops.jsonl";
pub const EVENTS: &str = "events.jsonl";
pub const LEDGER: &str = "ledger.jsonl";
pub const STATS: &str = "stats.json";
pub const CHECKPOINTS: &str = "checkpoints.json";

fn io(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<RunDir, PipelineError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io(&root))?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn read<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, PipelineError> {
        read_records(&self.path(name))
    }

    pub fn appender(&self, name: &str) -> Result<Appender, PipelineError> {
        Appender::open(&self.path(name))
    }

    /// Replaces a JSONL file with `records`.
    pub fn rewrite<T: Serialize>(&self, name: &str, records: &[T]) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        for r in records {
            crate::dataset::write_jsonl_line(&mut buf, r).expect("writing to memory");
        }
        write_atomic(&self.path(name), &buf)
    }

    pub fn checkpoints(&self) -> Result<Checkpoints, PipelineError> {
        let path = self.path(CHECKPOINTS);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Checkpoints::default()),
            Err(e) => Err(io(&path)(e)),
        }
    }

    pub fn save_checkpoints(&self, c: &Checkpoints) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(c).expect("checkpoints serialize");
        text.push('\n');
        write_atomic(&self.path(CHECKPOINTS), text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).expect("value serializes");
        text.push('\n');
        write_atomic(&self.path(name), text.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

/// Stage progress that cannot be derived from the output files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoints {
    #[serde(default)]
    pub explored_sites: BTreeSet<String>,
    /// Cached per-site diversity scores.
    #[serde(default)]
    pub diversity: BTreeMap<String, u8>,
}

/// Reads a JSONL file; a missing file is empty. An unterminated final line
/// that does not parse is a write cut short by a crash and is ignored.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io(path)(e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(PipelineError::Io(format!("{}:{}: {e}", path.display(), i + 1)));
            }
        }
    }
    Ok(out)
}

/// Append-only JSONL writer; every record is flushed as it is written, so a
/// record on disk is a checkpoint.
pub struct Appender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Appender {
    /// Opens for appending, first cutting off any unterminated last line.
    pub fn open(path: &Path) -> Result<Appender, PipelineError> {
        if let Ok(bytes) = fs::read(path) {
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                let f = OpenOptions::new().write(true).open(path).map_err(io(path))?;
                f.set_len(keep as u64).map_err(io(path))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io(path))?;
        Ok(Appender {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), PipelineError> {
        crate::dataset::write_jsonl_line(&mut self.out, record)
            .and_then(|_| self.out.flush())
            .map_err(io(&self.path))
    }
}
