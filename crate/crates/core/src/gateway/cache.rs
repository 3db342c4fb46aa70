use std::collections::HashMap;
use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Completion and embedding cache.
///
/// Always keeps an in-process map. With a directory, entries are also
/// persisted one file per key (`completions/<hex>.txt`,
/// `embeddings/<hex>.json`); the directory can be deleted at any time.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    completions: Mutex<HashMap<String, String>>,
    embeddings: Mutex<HashMap<String, Vec<f64>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("completions"))?;
        fs::create_dir_all(dir.join("embeddings"))?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn get_completion(&self, key: &str) -> std::io::Result<Option<String>> {
        if let Some(hit) = self.completions.lock().unwrap().get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        match fs::read_to_string(dir.join("completions").join(format!("{key}.txt"))) {
            Ok(text) => {
                self.completions
                    .lock()
                    .unwrap()
                    .insert(key.to_string(), text.clone());
                Ok(Some(text))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put_completion(&self, key: &str, text: &str) -> std::io::Result<()> {
        self.completions
            .lock()
            .unwrap()
            .insert(key.to_string(), text.to_string());
        if let Some(dir) = &self.dir {
            atomic_write(&dir.join("completions").join(format!("{key}.txt")), text.as_bytes())?;
        }
        Ok(())
    }

    pub fn get_embedding(&self, key: &str) -> std::io::Result<Option<Vec<f64>>> {
        if let Some(hit) = self.embeddings.lock().unwrap().get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        match fs::read(dir.join("embeddings").join(format!("{key}.json"))) {
            Ok(bytes) => {
                // A corrupt entry is treated as a miss and rewritten later.
                let Ok(values) = serde_json::from_slice::<Vec<f64>>(&bytes) else {
                    return Ok(None);
                };
                self.embeddings
                    .lock()
                    .unwrap()
                    .insert(key.to_string(), values.clone());
                Ok(Some(values))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put_embedding(&self, key: &str, values: &[f64]) -> std::io::Result<()> {
        self.embeddings
            .lock()
            .unwrap()
            .insert(key.to_string(), values.to_vec());
        if let Some(dir) = &self.dir {
            let bytes = serde_json::to_vec(values).expect("floats serialize");
            atomic_write(&dir.join("embeddings").join(format!("{key}.json")), &bytes)?;
        }
        Ok(())
    }
}

/// Write to a sibling temp file, then rename over the target.
fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_entries_survive_a_new_cache() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = ResponseCache::on_disk(dir.path()).unwrap();
            cache.put_completion("abc", "True").unwrap();
            cache.put_embedding("e1", &[0.6, 0.8]).unwrap();
        }
        let cache = ResponseCache::on_disk(dir.path()).unwrap();
        assert_eq!(cache.get_completion("abc").unwrap().as_deref(), Some("True"));
        assert_eq!(cache.get_embedding("e1").unwrap(), Some(vec![0.6, 0.8]));
        assert_eq!(cache.get_completion("zzz").unwrap(), None);
        let leftovers: Vec<_> = fs::read_dir(dir.path().join("completions"))
            .unwrap()
            .filter_map(Result::ok)
            .filter(|e| e.file_name().to_string_lossy().contains(".tmp."))
            .collect();
        assert!(leftovers.is_empty());
    }
}
