use crate::promptgen::ADOutput;
use std::path::{Path, PathBuf};

/// Content-addressed store of generated ADs keyed by prompt hash.
#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
}

impl Cache {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn entry_path(&self, hash: &str) -> PathBuf {
        let shard = hash.get(..2).unwrap_or("00");
        self.dir.join(shard).join(format!("{hash}.json"))
    }

    /// A hit requires the entry to exist, parse, and carry the same hash.
    /// Anything else is a miss; unreadable entries are logged.
    pub fn lookup(&self, hash: &str) -> Option<ADOutput> {
        let path = self.entry_path(hash);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "unreadable cache entry");
                return None;
            }
        };
        match serde_json::from_str::<ADOutput>(&text) {
            Ok(out) if out.prompt_hash == hash => Some(out),
            Ok(_) => {
                tracing::warn!(path = %path.display(), "cache entry hash mismatch, ignoring");
                None
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "corrupt cache entry, ignoring");
                None
            }
        }
    }

    pub fn store(&self, output: &ADOutput) -> std::io::Result<()> {
        let path = self.entry_path(&output.prompt_hash);
        let text = serde_json::to_string(output).expect("ADOutput serializes");
        super::atomic_write(&path, text.as_bytes())
    }
}
