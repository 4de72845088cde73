use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ChatMessage;
use crate::records::write_atomic;

/// SHA-256 over the canonical JSON encoding of `(model, temperature, messages)`.
pub fn cache_key(model_name: &str, temperature: f64, messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_vec(&(model_name, temperature, messages)).expect("messages serialize");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub key: String,
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Content-addressed response store. Entries live in memory and, when a
/// directory is configured, as `<key>.json` files that persist across
/// runs. Nothing is evicted.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, CachedResponse>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            dir: None,
            entries: RwLock::new(HashMap::new()),
        }
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir: Some(dir),
            entries: RwLock::new(HashMap::new()),
        })
    }

    fn path_for(dir: &Path, key: &str) -> PathBuf {
        dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        if let Some(hit) = self.entries.read().unwrap().get(key) {
            return Some(hit.clone());
        }
        let dir = self.dir.as_ref()?;
        let bytes = std::fs::read(Self::path_for(dir, key)).ok()?;
        match serde_json::from_slice::<CachedResponse>(&bytes) {
            Ok(entry) if entry.key == key => {
                self.entries.write().unwrap().insert(key.to_string(), entry.clone());
                Some(entry)
            }
            Ok(_) => {
                log::warn!("cache entry {key} is stored under the wrong key; ignoring it");
                None
            }
            Err(e) => {
                log::warn!("corrupt cache entry {key} ignored: {e}");
                None
            }
        }
    }

    pub fn put(&self, key: &str, value: CachedResponse) {
        let mut entries = self.entries.write().unwrap();
        if let Some(dir) = &self.dir {
            let bytes = serde_json::to_vec_pretty(&value).expect("cache entry serializes");
            if let Err(e) = write_atomic(&Self::path_for(dir, key), &bytes) {
                log::warn!("could not persist cache entry {key}: {e}");
            }
        }
        entries.insert(key.to_string(), value);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
