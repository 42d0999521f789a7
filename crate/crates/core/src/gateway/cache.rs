//! On-disk response cache: `<dir>/<first-2-hex>/<key>.json`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::sha256_hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_canonical: String,
    pub response: String,
    pub timestamp: String,
    pub checksum: String,
}

fn checksum(request_canonical: &str, response: &str) -> String {
    sha256_hex(format!("{request_canonical}\0{response}").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheLookup {
    Hit(String),
    Miss,
    /// Entry exists but fails its checksum or does not parse.
    Corrupt,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir
            .join(&key[..2.min(key.len())])
            .join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> CacheLookup {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(_) => return CacheLookup::Miss,
        };
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(e) if e.checksum == checksum(&e.request_canonical, &e.response) => {
                CacheLookup::Hit(e.response)
            }
            _ => {
                log::warn!(
                    "cache entry {} is corrupt; treating as a miss",
                    path.display()
                );
                CacheLookup::Corrupt
            }
        }
    }

    /// Writes through a temp file and an atomic rename.
    pub fn put(&self, key: &str, request_canonical: &str, response: &str) -> Result<()> {
        let path = self.path_for(key);
        let parent = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let entry = CacheEntry {
            request_canonical: request_canonical.to_string(),
            response: response.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            checksum: checksum(request_canonical, response),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
        serde_json::to_writer(&mut tmp, &entry)?;
        tmp.flush().map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }

    /// Number of entries on disk.
    pub fn len(&self) -> usize {
        self.keys().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<String> {
        let mut keys = Vec::new();
        for shard in std::fs::read_dir(&self.dir).into_iter().flatten().flatten() {
            if !shard.path().is_dir() {
                continue;
            }
            for f in std::fs::read_dir(shard.path())
                .into_iter()
                .flatten()
                .flatten()
            {
                let p = f.path();
                if p.extension().and_then(|e| e.to_str()) == Some("json") {
                    if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                        keys.push(stem.to_string());
                    }
                }
            }
        }
        keys.sort();
        keys
    }

    /// Removes entries whose key starts with `prefix` (all when empty).
    pub fn clear(&self, prefix: &str) -> Result<usize> {
        let mut removed = 0;
        for key in self.keys() {
            if key.starts_with(prefix) {
                let p = self.path_for(&key);
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        let key = "ab".repeat(32);
        assert_eq!(c.get(&key), CacheLookup::Miss);
        c.put(&key, "{req}", "response").unwrap();
        assert_eq!(c.get(&key), CacheLookup::Hit("response".into()));
        assert!(c.path_for(&key).starts_with(dir.path().join("ab")));
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn corrupt_entries_are_detected_and_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        let key = "cd".repeat(32);
        c.put(&key, "{req}", "good").unwrap();
        let p = c.path_for(&key);
        let mut e: CacheEntry = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        e.response = "tampered".into();
        std::fs::write(&p, serde_json::to_vec(&e).unwrap()).unwrap();
        assert_eq!(c.get(&key), CacheLookup::Corrupt);
        std::fs::write(&p, b"{not json").unwrap();
        assert_eq!(c.get(&key), CacheLookup::Corrupt);
        c.put(&key, "{req}", "fresh").unwrap();
        assert_eq!(c.get(&key), CacheLookup::Hit("fresh".into()));
    }

    #[test]
    fn clear_by_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        for k in ["aa11", "aa22", "bb33"] {
            let key = format!("{k}{}", "0".repeat(60));
            c.put(&key, "r", "x").unwrap();
        }
        assert_eq!(c.clear("aa").unwrap(), 2);
        assert_eq!(c.len(), 1);
        assert_eq!(c.clear("").unwrap(), 1);
        assert!(c.is_empty());
    }
}
