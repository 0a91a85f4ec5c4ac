//! The `--out` directory: artifacts, `timestamps.json` and `files.manifest`.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{runtime, CliResult};

pub const FILES_MANIFEST: &str = "files.manifest";
pub const TIMESTAMPS: &str = "timestamps.json";

static STARTED: OnceLock<SystemTime> = OnceLock::new();

/// Records the command start; the first call wins.
pub fn mark_start() -> SystemTime {
    *STARTED.get_or_init(SystemTime::now)
}

pub struct OutDir {
    root: PathBuf,
    started: SystemTime,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> crate::error::CliError + '_ {
    move |e| runtime(format!("{}: {e}", path.display()))
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(io(root))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            started: mark_start(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Creates `rel` (and parents) and returns its path.
    pub fn dir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        std::fs::create_dir_all(&p).map_err(io(&p))?;
        Ok(p)
    }

    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        std::fs::write(&p, bytes).map_err(io(&p))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| runtime(e.to_string()))?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    /// Writes the timestamps, then lists every file under the root with its
    /// size and sha256.
    pub fn finish(self) -> CliResult<()> {
        let finished = SystemTime::now();
        let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        self.write_json(
            TIMESTAMPS,
            &serde_json::json!({
                "started_unix": secs(self.started),
                "finished_unix": secs(finished),
                "elapsed_seconds": finished.duration_since(self.started).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            }),
        )?;
        let mut lines = Vec::new();
        for entry in walkdir::WalkDir::new(&self.root).sort_by_file_name() {
            let entry = entry.map_err(|e| runtime(e.to_string()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if rel == FILES_MANIFEST {
                continue;
            }
            let bytes = std::fs::read(entry.path()).map_err(io(entry.path()))?;
            let digest = Sha256::digest(&bytes);
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            lines.push(format!("{hex}  {:>10}  {rel}\n", bytes.len()));
        }
        self.write_bytes(FILES_MANIFEST, lines.concat().as_bytes())
    }
}
