//! Content-addressed stage outputs.
//!
//! A stage's output directory is named after the digest of its key (stage
//! name, stage version, the configuration it depends on and the digests of
//! its inputs). The directory holds the output files plus `artifact.json`,
//! a sidecar listing every file's SHA-256. A directory whose sidecar verifies
//! is reused instead of recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use eegvae_core::io::{json_digest, read_json, sha256_file, write_json};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIDECAR: &str = "artifact.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: String,
    pub stage_version: u32,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub dir: PathBuf,
    pub digest: String,
    pub cache_hit: bool,
}

impl Artifact {
    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

#[derive(Serialize)]
struct Key<'a, C: Serialize> {
    stage: &'a str,
    stage_version: u32,
    config: &'a C,
    inputs: &'a BTreeMap<String, String>,
}

fn list_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == SIDECAR || !entry.path().is_file() {
            continue;
        }
        files.insert(name, sha256_file(&entry.path())?);
    }
    Ok(files)
}

/// Checks a stage directory against its sidecar.
pub fn verify(dir: &Path) -> Result<Sidecar> {
    let sidecar: Sidecar = read_json(&dir.join(SIDECAR))?;
    for (name, digest) in &sidecar.files {
        let path = dir.join(name);
        let actual = sha256_file(&path).map_err(|_| Error::Integrity { path: path.clone(), reason: "missing".into() })?;
        if &actual != digest {
            return Err(Error::Integrity { path, reason: format!("sha256 {actual}, sidecar says {digest}") });
        }
    }
    Ok(sidecar)
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Store {
        Store { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Returns the cached output of a stage, producing it first if no valid
    /// copy exists. `produce` writes its files into the directory it is given.
    pub fn stage<C: Serialize>(
        &self,
        stage: &str,
        stage_version: u32,
        config: &C,
        inputs: BTreeMap<String, String>,
        produce: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<Artifact> {
        let key = json_digest(&Key { stage, stage_version, config, inputs: &inputs });
        let dir = self.root.join(stage).join(&key[..16]);
        let wrap = |e: Error| Error::Stage { stage: stage.to_string(), path: dir.clone(), source: Box::new(e) };

        if dir.join(SIDECAR).exists() {
            if let Ok(sidecar) = verify(&dir) {
                if sidecar.stage == stage && sidecar.stage_version == stage_version {
                    log::debug!("{stage}: cache hit {}", dir.display());
                    return Ok(Artifact { dir, digest: sidecar.digest, cache_hit: true });
                }
            }
            log::warn!("{stage}: discarding invalid cached artifact {}", dir.display());
        }

        let parent = self.root.join(stage);
        fs::create_dir_all(&parent).map_err(|e| wrap(Error::io(&parent, e)))?;
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = parent.join(format!(".tmp-{}-{}-{n}", &key[..16], std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| wrap(Error::io(&tmp, e)))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| wrap(Error::io(&tmp, e)))?;
        let built = produce(&tmp).and_then(|()| {
            let files = list_files(&tmp)?;
            let digest = json_digest(&(&key, &files));
            let sidecar = Sidecar {
                stage: stage.to_string(),
                stage_version,
                config_digest: json_digest(config),
                inputs,
                files,
                digest: digest.clone(),
            };
            write_json(&tmp.join(SIDECAR), &sidecar)?;
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
            Ok(digest)
        });
        match built {
            Ok(digest) => Ok(Artifact { dir, digest, cache_hit: false }),
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                Err(wrap(e))
            }
        }
    }
}

pub fn inputs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn second_call_is_a_cache_hit() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let calls = Cell::new(0);
        let produce = |d: &Path| {
            calls.set(calls.get() + 1);
            fs::write(d.join("x.txt"), b"hello").map_err(|e| Error::io(d, e))
        };
        let a = store.stage("demo", 1, &42, inputs([("in", "abc")]), produce).unwrap();
        let b = store.stage("demo", 1, &42, inputs([("in", "abc")]), produce).unwrap();
        assert_eq!((a.cache_hit, b.cache_hit, calls.get()), (false, true, 1));
        assert_eq!(a.digest, b.digest);
        let c = store.stage("demo", 1, &43, inputs([("in", "abc")]), produce).unwrap();
        assert_ne!(c.dir, a.dir);
    }

    #[test]
    fn tampered_output_is_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let produce = |d: &Path| fs::write(d.join("x.txt"), b"hello").map_err(|e| Error::io(d, e));
        let a = store.stage("demo", 1, &1, BTreeMap::new(), produce).unwrap();
        fs::write(a.path("x.txt"), b"tampered").unwrap();
        assert!(matches!(verify(&a.dir), Err(Error::Integrity { .. })));
        let b = store.stage("demo", 1, &1, BTreeMap::new(), produce).unwrap();
        assert!(!b.cache_hit);
        assert_eq!(fs::read(b.path("x.txt")).unwrap(), b"hello");
    }

    #[test]
    fn failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let err = store.stage("broken", 1, &1, BTreeMap::new(), |_| Err(Error::Config("boom".into()))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken") && msg.contains("boom"), "{msg}");
    }
}
