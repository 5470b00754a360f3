use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{ChatRequest, ChatResponse, GateError};
use crate::util::{sha256_hex, write_atomic};

/// What the cache remembers about a request. Message bodies are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub model_id: String,
    pub message_count: usize,
    pub prompt_chars: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request_digest: String,
    pub backend_id: String,
    pub request: RequestSummary,
    pub response: ChatResponse,
    /// SHA-256 of the serialized response.
    pub checksum: String,
}

/// Content-addressed response store laid out as `<dir>/<key[0..2]>/<key>.json`.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), locks: Mutex::new(HashMap::new()) }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(request_digest: &str, backend_id: &str) -> String {
        sha256_hex(format!("{request_digest}\n{backend_id}"))
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2.min(key.len())]).join(format!("{key}.json"))
    }

    /// Per-key mutex; holding it serializes lookup and fill of one entry.
    pub fn lock_key(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("cache lock table")
            .entry(key.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(())))
            .clone()
    }

    pub fn get(&self, key: &str) -> Result<Option<ChatResponse>, GateError> {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let corrupt = || GateError::CacheCorrupt(path.display().to_string());
        let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|_| corrupt())?;
        let sum = sha256_hex(serde_json::to_vec(&entry.response).map_err(|_| corrupt())?);
        if entry.key != key || entry.checksum != sum {
            return Err(corrupt());
        }
        Ok(Some(entry.response))
    }

    pub fn put(&self, key: &str, digest: &str, request: &ChatRequest, response: &ChatResponse) -> Result<(), GateError> {
        let mut stored = response.clone();
        stored.cached = false;
        let checksum = sha256_hex(serde_json::to_vec(&stored).expect("response serializes"));
        let entry = CacheEntry {
            key: key.to_string(),
            request_digest: digest.to_string(),
            backend_id: response.backend_id.clone(),
            request: RequestSummary {
                model_id: request.model_id.clone(),
                message_count: request.messages.len(),
                prompt_chars: request.messages.iter().map(|m| m.content.chars().count()).sum(),
                temperature: request.temperature,
                max_output_tokens: request.max_output_tokens,
                seed: request.seed,
            },
            response: stored,
            checksum,
        };
        let bytes = serde_json::to_vec_pretty(&entry).expect("entry serializes");
        write_atomic(&self.path_for(key), &bytes)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(text: &str) -> ChatResponse {
        ChatResponse { text: text.into(), prompt_tokens: 3, output_tokens: 1, backend_id: "replay".into(), cached: false }
    }

    #[test]
    fn put_get_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let req = ChatRequest::user_prompt("m", "hello", Some(7));
        let digest = req.digest();
        let key = ResponseCache::key(&digest, "replay");
        assert_eq!(cache.get(&key).unwrap(), None);
        cache.put(&key, &digest, &req, &resp("hi")).unwrap();
        assert_eq!(cache.get(&key).unwrap().unwrap().text, "hi");
        assert!(cache.path_for(&key).starts_with(dir.path().join(&key[..2])));

        let path = cache.path_for(&key);
        let tampered = std::fs::read_to_string(&path).unwrap().replace("\"hi\"", "\"ho\"");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(cache.get(&key), Err(GateError::CacheCorrupt(_))));
    }

    #[test]
    fn key_depends_on_backend() {
        assert_ne!(ResponseCache::key("d", "a"), ResponseCache::key("d", "b"));
    }
}
