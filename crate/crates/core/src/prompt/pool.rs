use std::path::Path;
use std::sync::{Arc, RwLock};

/// Titles of previously generated tasks, injected into initial degradation
/// prompts to steer the generator away from repeats. Append-only and shared
/// between workers; clones share the same storage.
#[derive(Debug, Clone, Default)]
pub struct MemoryPool {
    titles: Arc<RwLock<Vec<String>>>,
}

impl MemoryPool {
    /// Most recent titles included in a prompt.
    pub const PROMPT_CAP: usize = 500;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_titles<I: IntoIterator<Item = String>>(titles: I) -> Self {
        let pool = Self::new();
        for t in titles {
            pool.push(t);
        }
        pool
    }

    /// Seeds the pool from the bundle directory names under a dataset root,
    /// sorted by name. A missing root yields an empty pool.
    pub fn from_dataset_root(root: &Path) -> std::io::Result<Self> {
        if !root.exists() {
            return Ok(Self::new());
        }
        let mut names = Vec::new();
        for entry in std::fs::read_dir(root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    names.push(name.to_string());
                }
            }
        }
        names.sort();
        Ok(Self::from_titles(names))
    }

    /// Appends a title unless it is already present. Returns whether it was new.
    pub fn push(&self, title: impl Into<String>) -> bool {
        let title = title.into();
        let mut guard = self.titles.write().unwrap_or_else(|e| e.into_inner());
        if guard.contains(&title) {
            return false;
        }
        guard.push(title);
        true
    }

    /// Consistent copy of the most recent `PROMPT_CAP` titles, oldest first.
    pub fn snapshot(&self) -> Vec<String> {
        let guard = self.titles.read().unwrap_or_else(|e| e.into_inner());
        let start = guard.len().saturating_sub(Self::PROMPT_CAP);
        guard[start..].to_vec()
    }

    pub fn len(&self) -> usize {
        self.titles.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
