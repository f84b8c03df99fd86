use std::fs;
use std::path::{Path, PathBuf};

use distill_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serialize;

const MANIFEST: &str = "manifest.json";
const SHARD: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub fingerprint: String,
    pub length: usize,
    pub complete: bool,
}

/// On-disk store of per-sample teacher outputs, keyed by dataset index.
///
/// Every entry is written atomically, so a crash leaves either a whole
/// entry or none. A manifest whose fingerprint or length differs from the
/// requested one invalidates the directory.
pub struct CacheStore {
    root: PathBuf,
    manifest: CacheManifest,
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>, fingerprint: &str, length: usize) -> Result<Self> {
        let root = root.into();
        let wanted = CacheManifest { fingerprint: fingerprint.to_string(), length, complete: false };
        let existing =
            fs::read(root.join(MANIFEST)).ok().and_then(|b| serde_json::from_slice::<CacheManifest>(&b).ok());
        let manifest = match existing {
            Some(m) if m.fingerprint == wanted.fingerprint && m.length == length => m,
            _ => {
                if root.exists() {
                    fs::remove_dir_all(&root).map_err(|e| Error::storage(&root, e))?;
                }
                fs::create_dir_all(&root).map_err(|e| Error::storage(&root, e))?;
                wanted
            }
        };
        let store = CacheStore { root, manifest };
        store.write_manifest()?;
        Ok(store)
    }

    fn write_manifest(&self) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::Other(e.to_string()))?;
        serialize::write_atomic(&self.root.join(MANIFEST), &bytes)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn is_complete(&self) -> bool {
        self.manifest.complete
    }

    fn entry_path(&self, index: usize) -> PathBuf {
        self.root.join((index / SHARD).to_string()).join(format!("{index}.bin"))
    }

    pub fn contains(&self, index: usize) -> bool {
        self.entry_path(index).is_file()
    }

    pub fn put(&self, index: usize, entries: &[(String, Tensor)]) -> Result<()> {
        if index >= self.manifest.length {
            return Err(Error::PreconditionViolation(format!(
                "cache index {index} outside dataset of {}",
                self.manifest.length
            )));
        }
        serialize::save(&self.entry_path(index), entries)
    }

    pub fn get(&self, index: usize) -> Result<Vec<(String, Tensor)>> {
        match serialize::load(&self.entry_path(index)) {
            Ok(v) => Ok(v),
            Err(Error::FileNotFound(_)) | Err(Error::Format { .. }) => Err(Error::CacheMiss(vec![index])),
            Err(e) => Err(e),
        }
    }

    /// Entries for every index, or `CacheMiss` naming all absent ones.
    pub fn get_batch(&self, indices: &[usize]) -> Result<Vec<Vec<(String, Tensor)>>> {
        let mut out = Vec::with_capacity(indices.len());
        let mut missing = Vec::new();
        for &i in indices {
            match self.get(i) {
                Ok(v) => out.push(v),
                Err(Error::CacheMiss(_)) => missing.push(i),
                Err(e) => return Err(e),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::CacheMiss(missing))
        }
    }

    /// Marks the cache complete once every index has an entry.
    pub fn finalize(&mut self) -> Result<bool> {
        if !self.manifest.complete && (0..self.manifest.length).all(|i| self.contains(i)) {
            self.manifest.complete = true;
            self.write_manifest()?;
        }
        Ok(self.manifest.complete)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_invalidate() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("c");
        let t = Tensor::from_vec(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let mut s = CacheStore::open(&root, "fp1", 2).unwrap();
        s.put(1, &[("out".into(), t.clone())]).unwrap();
        assert!(s.get(1).unwrap()[0].1.bit_eq(&t));
        assert!(matches!(s.get_batch(&[0, 1]), Err(Error::CacheMiss(ref m)) if m == &vec![0]));
        assert!(!s.finalize().unwrap());
        s.put(0, &[("out".into(), t.clone())]).unwrap();
        assert!(s.finalize().unwrap());

        let reopened = CacheStore::open(&root, "fp1", 2).unwrap();
        assert!(reopened.is_complete() && reopened.contains(0));
        let changed = CacheStore::open(&root, "fp2", 2).unwrap();
        assert!(!changed.is_complete() && !changed.contains(0));
    }
}
