use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use super::{StateGP, StateGpRecord};
use crate::error::{Error, Result};
use crate::StateId;

/// Fitted models keyed by state id, shared across threads and optionally
/// persisted as one JSON file per state.
#[derive(Debug, Default)]
pub struct ModelCache {
    models: RwLock<HashMap<StateId, Arc<StateGP>>>,
}

fn model_path(dir: &Path, state: StateId) -> PathBuf {
    dir.join(format!("state_{state}.json"))
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, state: StateId) -> Option<Arc<StateGP>> {
        self.models.read().expect("model cache poisoned").get(&state).cloned()
    }

    pub fn insert(&self, state: StateId, model: StateGP) -> Arc<StateGP> {
        let model = Arc::new(model);
        self.models
            .write()
            .expect("model cache poisoned")
            .entry(state)
            .or_insert(model)
            .clone()
    }

    /// Returns the cached model or fits one. Concurrent callers for the same
    /// state may both fit; the first insert wins and both see it.
    pub fn get_or_fit<F>(&self, state: StateId, fit: F) -> Result<Arc<StateGP>>
    where
        F: FnOnce() -> Result<StateGP>,
    {
        if let Some(model) = self.get(state) {
            return Ok(model);
        }
        Ok(self.insert(state, fit()?))
    }

    pub fn len(&self) -> usize {
        self.models.read().expect("model cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> Vec<StateId> {
        let mut ids: Vec<_> = self.models.read().expect("model cache poisoned").keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for state in self.states() {
            let model = self.get(state).expect("listed state is cached");
            let path = model_path(dir, state);
            let json = serde_json::to_string_pretty(&model.to_record(Some(state)))?;
            fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads every `state_<id>.json` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let cache = ModelCache::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if !(name.starts_with("state_") && name.ends_with(".json")) {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let record: StateGpRecord = serde_json::from_str(&text)?;
            let state = record
                .state_id
                .ok_or_else(|| Error::Input(format!("{} has no state id", path.display())))?;
            cache.insert(state, StateGP::from_record(record)?);
        }
        Ok(cache)
    }
}
