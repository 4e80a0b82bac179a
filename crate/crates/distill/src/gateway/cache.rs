use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use distill_core::llm::CanonicalRequest;
use distill_core::LlmRequest;
use serde::{Deserialize, Serialize};

/// One cached completion, stored as `<cache_key>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: CanonicalRequest,
    pub response_text: String,
    pub created_at: String,
}

/// Content-addressed completion store, one file per request key.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// The cached text for `request`. Unreadable entries, and entries whose
    /// stored request differs from this one, count as misses.
    pub fn get(&self, key: &str, request: &LlmRequest) -> Option<String> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.request == request.canonical()).then_some(entry.response_text)
    }

    pub fn put(&self, key: &str, request: &LlmRequest, response_text: &str) -> io::Result<()> {
        let entry = CacheEntry {
            request: request.canonical(),
            response_text: response_text.to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        let body = crate::json::to_canonical_string(&entry).map_err(io::Error::other)?;
        // Writers of one key race harmlessly: the content is identical.
        let tmp = self.dir.join(format!(
            "{key}.json.tmp-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        fs::write(&tmp, body)?;
        fs::rename(&tmp, self.path(key))
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|d| {
                d.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
