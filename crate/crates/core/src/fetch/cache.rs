//! On-disk tile cache.
//!
//! ```text
//! {root}/tiles/{z}/{x}/{y}   raw payload as served
//! {root}/index.jsonl         one CacheEntry per stored payload, last entry wins
//! ```

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::write_atomic;
use crate::tile::TileCoord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub sha256: String,
    pub content_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub etag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_modified: Option<String>,
    pub fetched_at: String,
}

#[derive(Debug)]
pub struct TileCache {
    root: PathBuf,
    index: Mutex<HashMap<String, CacheEntry>>,
}

impl TileCache {
    pub fn open(root: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(root.join("tiles"))?;
        let mut index = HashMap::new();
        match std::fs::read_to_string(root.join("index.jsonl")) {
            Ok(text) => {
                // a torn last line simply fails to parse
                for line in text.lines() {
                    if let Ok(e) = serde_json::from_str::<CacheEntry>(line) {
                        index.insert(e.key.clone(), e);
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(Self {
            root: root.to_path_buf(),
            index: Mutex::new(index),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tile_path(&self, c: TileCoord) -> PathBuf {
        self.root
            .join("tiles")
            .join(c.z.to_string())
            .join(c.x.to_string())
            .join(c.y.to_string())
    }

    pub fn entry(&self, c: TileCoord) -> Option<CacheEntry> {
        self.index
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&c.key())
            .cloned()
    }

    /// Payload and its index entry. Entries whose digest no longer matches are misses.
    /// A payload without an entry is returned with `None` for the caller to validate.
    pub fn load(&self, c: TileCoord) -> std::io::Result<Option<(Vec<u8>, Option<CacheEntry>)>> {
        let bytes = match std::fs::read(self.tile_path(c)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        match self.entry(c) {
            Some(e) if e.sha256 == hex::encode(Sha256::digest(&bytes)) => {
                Ok(Some((bytes, Some(e))))
            }
            Some(_) => Ok(None),
            None => Ok(Some((bytes, None))),
        }
    }

    /// Writes the payload atomically, then appends its index entry.
    pub fn store(
        &self,
        c: TileCoord,
        bytes: &[u8],
        content_type: &str,
        etag: Option<String>,
        last_modified: Option<String>,
        fetched_at: &str,
    ) -> std::io::Result<CacheEntry> {
        write_atomic(&self.tile_path(c), bytes)?;
        let entry = CacheEntry {
            key: c.key(),
            sha256: hex::encode(Sha256::digest(bytes)),
            content_type: content_type.to_string(),
            etag,
            last_modified,
            fetched_at: fetched_at.to_string(),
        };
        let mut line = serde_json::to_vec(&entry).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut index = self.index.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("index.jsonl"))?;
        f.write_all(&line)?;
        f.sync_data()?;
        index.insert(entry.key.clone(), entry.clone());
        Ok(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_load_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let c = TileCoord::new(18, 5, 6).unwrap();
        let cache = TileCache::open(dir.path()).unwrap();
        assert!(cache.load(c).unwrap().is_none());
        cache
            .store(c, b"payload", "image/png", Some("\"e1\"".into()), None, "t")
            .unwrap();
        let (b, e) = cache.load(c).unwrap().unwrap();
        assert_eq!(b, b"payload");
        assert_eq!(e.unwrap().etag.as_deref(), Some("\"e1\""));

        let reopened = TileCache::open(dir.path()).unwrap();
        assert!(reopened.load(c).unwrap().is_some());
        std::fs::write(reopened.tile_path(c), b"payloa").unwrap();
        assert!(reopened.load(c).unwrap().is_none());
    }
}
