//! Content-addressed response cache: `<dir>/<first two hex chars>/<key>.json`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::{ArbitrationRequest, ArbitrationResult};
use crate::error::{Error, Result};

/// SHA-256 (hex) over the sample content hash, sorted candidates and prompt version.
pub fn cache_key(request: &ArbitrationRequest) -> Result<String> {
    let mut sorted = request.candidates.clone();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    h.update(request.sample.content_hash()?);
    h.update((sorted.len() as u64).to_le_bytes());
    for c in sorted {
        h.update((c as u64).to_le_bytes());
    }
    h.update(request.prompt_version.as_bytes());
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: PathBuf,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            key_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let prefix = key.get(..2).unwrap_or(key);
        self.dir.join(prefix).join(format!("{key}.json"))
    }

    fn lock_for(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(key.to_string()).or_default().clone()
    }

    pub fn get(&self, key: &str) -> Result<Option<ArbitrationResult>> {
        let path = self.path_for(key);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Writes through a temporary file and renames it into place.
    pub fn put(&self, key: &str, result: &ArbitrationResult) -> Result<()> {
        let lock = self.lock_for(key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.path_for(key);
        let parent = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
        tmp.write_all(&serde_json::to_vec(result)?)
            .map_err(|e| Error::io(tmp.path().to_path_buf(), e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}
