//! Pipeline stages. Each reads the previous stage's files under the output
//! directory and writes its own, skipping items already on disk.

use std::path::{Path, PathBuf};

use gnv_core::fsutil::write_atomic;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::progress::Progress;
use crate::state::{RunState, Stage};

mod compose;
mod emit;
mod generate;
mod prompts;
mod validate;

pub use compose::{compose, SceneFile, SCENES_DIR};
pub use emit::{check, emit, stats, RunManifest, MANIFEST_FILE};
pub use generate::{generate, BackgroundMeta, InstanceMeta, BACKGROUNDS_DIR};
pub use prompts::{
    optimize_prompts, PromptSummary, LD_AGENT_FILE, PROMPTS_DIR, VALIDATION_AGENT_FILE,
};
pub use validate::validate;

/// Shared state of one command invocation.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
    pub progress: Progress,
    pub state: RunState,
    pool: rayon::ThreadPool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, progress: Progress) -> Result<Self, CliError> {
        cfg.check()?;
        let out = cfg.dataset.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let hash = cfg.hash();
        let state = RunState::open(&out, &hash)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            cfg,
            out,
            hash,
            progress,
            state,
            pool,
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    /// Maps `f` over `items` on the worker pool, keeping input order.
    pub fn par_map<T: Sync, R: Send>(
        &self,
        items: &[T],
        f: impl Fn(&T) -> R + Sync + Send,
    ) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    pub fn finish(&mut self, stage: Stage) -> Result<(), CliError> {
        self.state.finish(stage);
        self.state.save(&self.out)?;
        Ok(())
    }
}

/// Per-stream, per-item seed: the first 8 bytes of
/// `sha256(seed_le || stream || index_le)`, little-endian.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

pub fn item_id(index: u64) -> String {
    format!("{index:06}")
}

/// Outcome of one stage item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemStatus {
    Done,
    Skipped,
    Degenerate,
    Failed,
}

impl ItemStatus {
    pub fn label(self) -> &'static str {
        match self {
            ItemStatus::Done => "ok",
            ItemStatus::Skipped => "skipped",
            ItemStatus::Degenerate => "degenerate",
            ItemStatus::Failed => "failed",
        }
    }
}

/// Item-level error: `Skip` is logged and the stage goes on, `Fatal` stops it.
pub enum ItemError {
    Skip(String),
    Fatal(CliError),
}

impl From<CliError> for ItemError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Backend(m) => ItemError::Skip(m),
            other => ItemError::Fatal(other),
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub done: u64,
    pub skipped: u64,
    pub degenerate: u64,
    pub failed: u64,
}

impl Tally {
    pub fn total(&self) -> u64 {
        self.done + self.skipped + self.degenerate + self.failed
    }
}

/// Reports per-item results and aborts on the first fatal one.
pub fn collect(
    ctx: &Ctx,
    stage: Stage,
    results: Vec<(String, Result<ItemStatus, ItemError>)>,
) -> Result<Tally, CliError> {
    let mut tally = Tally::default();
    let mut fatal = None;
    for (id, r) in results {
        match r {
            Ok(s) => {
                ctx.progress.item(stage.name(), &id, s.label(), None);
                match s {
                    ItemStatus::Done => tally.done += 1,
                    ItemStatus::Skipped => tally.skipped += 1,
                    ItemStatus::Degenerate => tally.degenerate += 1,
                    ItemStatus::Failed => tally.failed += 1,
                }
            }
            Err(ItemError::Skip(msg)) => {
                log::warn!("{} {id} failed: {msg}", stage.name());
                ctx.progress.item(stage.name(), &id, "failed", Some(&msg));
                tally.failed += 1;
            }
            Err(ItemError::Fatal(e)) => {
                fatal.get_or_insert(e);
            }
        }
    }
    match fatal {
        Some(e) => Err(e),
        None => Ok(tally),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Sorted subdirectory or file paths of `dir`; empty if `dir` is missing.
pub fn list_dir(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CliError::io(dir, e))?;
    out.sort();
    Ok(out)
}
