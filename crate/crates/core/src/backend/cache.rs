use std::io::Write;
use std::path::{Path, PathBuf};

use super::{CompletionRequest, CompletionResponse, ProviderKind};

/// One JSON file per request content hash.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, request: &CompletionRequest) -> PathBuf {
        self.dir.join(format!("{}.json", request.cache_key()))
    }

    /// Cached response, relabelled as coming from the cache. Unreadable
    /// entries count as misses.
    pub fn get(&self, request: &CompletionRequest) -> Option<CompletionResponse> {
        let bytes = std::fs::read(self.path_for(request)).ok()?;
        let mut response: CompletionResponse = serde_json::from_slice(&bytes).ok()?;
        response.provider = ProviderKind::Cache;
        response.latency_ms = 0;
        Some(response)
    }

    /// Write through a temp file and rename, so concurrent readers never see
    /// a partial entry.
    pub fn put(&self, request: &CompletionRequest, response: &CompletionResponse) -> std::io::Result<()> {
        let body = serde_json::to_vec_pretty(response)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&body)?;
        tmp.persist(self.path_for(request)).map_err(|e| e.error)?;
        Ok(())
    }
}
