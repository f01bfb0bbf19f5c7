//! Manifest-backed model store.
//!
//! Layout: `registry/<model_id>/{manifest.json, weights.bin}`. Manifest
//! writes are serialized through an advisory lock file; reads never take
//! the lock and see whole files thanks to write-then-rename.

use crate::error::{Error, Result};
use crate::nn::{build_classifier, load_weights, save_weights, Arch, Network};
use crate::zoo::{ModelRecord, Role};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

pub struct Registry {
    root: PathBuf,
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn acquire_lock(path: &Path) -> Result<LockGuard> {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match std::fs::OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(_) => {
                return Ok(LockGuard {
                    path: path.to_path_buf(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                if Instant::now() > deadline {
                    return Err(Error::Io(std::io::Error::new(
                        std::io::ErrorKind::TimedOut,
                        format!("registry lock {} held too long", path.display()),
                    )));
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

impl Registry {
    pub fn open(root: &Path) -> Result<Registry> {
        std::fs::create_dir_all(root)?;
        Ok(Registry {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn model_dir(&self, model_id: &str) -> PathBuf {
        self.root.join(model_id)
    }

    pub fn contains(&self, model_id: &str) -> bool {
        self.model_dir(model_id).join("manifest.json").is_file()
    }

    /// Append-or-replace keyed by `model_id`.
    pub fn put(&self, record: &ModelRecord, net: &Network) -> Result<()> {
        record.validate()?;
        let dir = self.model_dir(&record.model_id);
        std::fs::create_dir_all(&dir)?;
        save_weights(net, &dir.join("weights.bin"))?;
        let _lock = acquire_lock(&self.root.join(".lock"))?;
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(record)?)?;
        std::fs::rename(&tmp, dir.join("manifest.json"))?;
        Ok(())
    }

    pub fn get(&self, model_id: &str) -> Result<ModelRecord> {
        let path = self.model_dir(model_id).join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::NotFound(format!("model `{model_id}` not in registry")))?;
        let record: ModelRecord = serde_json::from_str(&text).map_err(|e| Error::Integrity {
            path: path.display().to_string(),
            field: "manifest".to_string(),
            reason: e.to_string(),
        })?;
        Ok(record)
    }

    /// All records, sorted by model id, optionally filtered.
    pub fn list(&self, filter: &RecordFilter) -> Result<Vec<ModelRecord>> {
        let mut ids: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join("manifest.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        let mut out = Vec::new();
        for id in ids {
            let rec = self.get(&id)?;
            if filter.matches(&rec) {
                out.push(rec);
            }
        }
        Ok(out)
    }

    /// Rebuild the architecture and load the stored weights.
    pub fn load_network(&self, record: &ModelRecord) -> Result<Network> {
        let mut net = build_classifier(
            record.arch,
            &record.input_shape,
            record.num_classes,
            record.seed,
        );
        let path = self.root.join(&record.weights_ref);
        if !path.is_file() {
            return Err(Error::NotFound(format!(
                "weights for `{}` missing at {}",
                record.model_id,
                path.display()
            )));
        }
        load_weights(&mut net, &path)?;
        Ok(net)
    }

    /// Disk cache for the victim's labels on an index list, so repeated
    /// extraction attacks do not re-query the victim.
    pub fn label_cache_path(&self, victim_id: &str, split_id: &str) -> PathBuf {
        self.model_dir(victim_id)
            .join(format!("labels-{split_id}.json"))
    }
}

#[derive(Default, Clone)]
pub struct RecordFilter {
    pub role: Option<Role>,
    pub arch: Option<Arch>,
    pub parent: Option<String>,
}

impl RecordFilter {
    pub fn role(role: Role) -> Self {
        RecordFilter {
            role: Some(role),
            ..Default::default()
        }
    }

    fn matches(&self, rec: &ModelRecord) -> bool {
        if let Some(r) = self.role {
            if rec.role != r {
                return false;
            }
        }
        if let Some(a) = self.arch {
            if rec.arch != a {
                return false;
            }
        }
        if let Some(p) = &self.parent {
            match &rec.lineage {
                Some(l) if &l.parent == p => {}
                _ => return false,
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{Lineage, ModelRecord};

    fn sample_record(id: &str, role: Role) -> (ModelRecord, Network) {
        let net = build_classifier(Arch::TinyCnn, &[1, 8, 8], 4, 1);
        let lineage = match role {
            Role::Positive | Role::Pirated => Some(Lineage {
                parent: "victim".to_string(),
                attack: "extract-label".to_string(),
            }),
            _ => None,
        };
        let rec = ModelRecord {
            model_id: id.to_string(),
            role,
            arch: Arch::TinyCnn,
            lineage,
            weights_ref: format!("{id}/weights.bin"),
            test_accuracy: 0.5,
            seed: 1,
            input_shape: [1, 8, 8],
            num_classes: 4,
            metadata: Default::default(),
        };
        (rec, net)
    }

    #[test]
    fn put_get_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let (rec, net) = sample_record("m1", Role::Victim);
        reg.put(&rec, &net).unwrap();
        assert_eq!(reg.get("m1").unwrap(), rec);
        let loaded = reg.load_network(&rec).unwrap();
        assert_eq!(loaded.max_param_delta(&net), 0.0);
    }

    #[test]
    fn get_missing_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        assert!(matches!(reg.get("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn list_filters_by_role() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        for (id, role) in [("a", Role::Victim), ("b", Role::Positive), ("c", Role::Positive)] {
            let (rec, net) = sample_record(id, role);
            reg.put(&rec, &net).unwrap();
        }
        let positives = reg.list(&RecordFilter::role(Role::Positive)).unwrap();
        assert_eq!(positives.len(), 2);
        assert!(positives.iter().all(|r| r.role == Role::Positive));
    }
}
