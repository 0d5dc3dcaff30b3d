//! `state.json`: which stages finished and which items each one completed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use gnv_core::fsutil::write_atomic;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prompts,
    Generate,
    Validate,
    Compose,
    Emit,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prompts => "prompts",
            Stage::Generate => "generate",
            Stage::Validate => "validate",
            Stage::Compose => "compose",
            Stage::Emit => "emit",
            Stage::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    /// Last stage that ran to completion, if any.
    pub stage: Option<Stage>,
    pub completed_item_ids: BTreeMap<Stage, BTreeSet<String>>,
}

impl RunState {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.into(),
            stage: None,
            completed_item_ids: BTreeMap::new(),
        }
    }

    /// Loads the state under `out_dir`, or starts a fresh one. An existing
    /// state written under another configuration is refused.
    pub fn open(out_dir: &Path, config_hash: &str) -> Result<Self, CliError> {
        let path = out_dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let state: RunState = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{} is not a run state: {e}", path.display())))?;
        if state.config_hash != config_hash {
            return Err(CliError::Config(format!(
                "{} belongs to a run with config hash {}, current config hashes to {}; use a fresh --out directory",
                out_dir.display(),
                state.config_hash,
                config_hash
            )));
        }
        Ok(state)
    }

    pub fn save(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join(STATE_FILE);
        let text = serde_json::to_string_pretty(self).expect("state serializes") + "\n";
        write_atomic(&path, text.as_bytes()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stage.is_some_and(|s| s >= stage)
    }

    pub fn finish(&mut self, stage: Stage) {
        if !self.is_done(stage) {
            self.stage = Some(stage);
        }
    }
}

/// Thread-safe collector of completed item ids, flushed into the state.
#[derive(Default)]
pub struct Completed(Mutex<BTreeSet<String>>);

impl Completed {
    pub fn add(&self, id: &str) {
        self.0
            .lock()
            .expect("completed set poisoned")
            .insert(id.into());
    }

    pub fn merge_into(self, state: &mut RunState, stage: Stage) {
        let ids = self.0.into_inner().expect("completed set poisoned");
        state
            .completed_item_ids
            .entry(stage)
            .or_default()
            .extend(ids);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = RunState::new("aaa");
        s.finish(Stage::Generate);
        s.save(dir.path()).unwrap();
        assert_eq!(RunState::open(dir.path(), "aaa").unwrap(), s);
        assert!(matches!(
            RunState::open(dir.path(), "bbb"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn stages_only_move_forward() {
        let mut s = RunState::new("h");
        s.finish(Stage::Compose);
        s.finish(Stage::Generate);
        assert_eq!(s.stage, Some(Stage::Compose));
        assert!(s.is_done(Stage::Validate));
        assert!(!s.is_done(Stage::Emit));
    }
}
