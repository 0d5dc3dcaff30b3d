use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gnv_core::dataset::{
    compute_stats, validate_dataset, DatasetBuilder, PipelineStats, SceneObject, Violation,
    ANNOTATIONS_FILE, STATS_FILE,
};
use gnv_core::mask::rle_decode;
use gnv_core::prompts;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::compose::{SceneFile, SCENES_DIR, SCENE_FILE};
use super::generate::IMAGE_FILE;
use super::prompts::{resolve_prompt, LD_AGENT_FILE, VALIDATION_AGENT_FILE};
use super::{list_dir, read_json, write_json, Ctx};
use crate::error::CliError;
use crate::state::Stage;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// sha256 of the system prompts the run used.
    pub prompts: BTreeMap<String, String>,
    /// sha256 of the prompt assets shipped with the tool.
    pub shipped_prompts: BTreeMap<String, String>,
    pub scene_seeds: BTreeMap<String, u64>,
    pub images: u64,
    pub annotations: u64,
}

fn shipped_prompt_hashes() -> BTreeMap<String, String> {
    use gnv_core::prompts::*;
    [
        ("ld_agent_initial", LD_AGENT_INITIAL),
        ("ld_agent_optimized", LD_AGENT_OPTIMIZED),
        ("validation_initial", VALIDATION_INITIAL),
        ("validation_optimized", VALIDATION_OPTIMIZED),
        ("evaluator_system", EVALUATOR_SYSTEM),
        ("tgd_system", TGD_SYSTEM),
        ("prompt_validator_system", PROMPT_VALIDATOR_SYSTEM),
        ("evaluator_validation_system", EVALUATOR_VALIDATION_SYSTEM),
        ("tgd_validation_system", TGD_VALIDATION_SYSTEM),
        (
            "prompt_validator_validation_system",
            PROMPT_VALIDATOR_VALIDATION_SYSTEM,
        ),
        ("background_template", BACKGROUND_TEMPLATE),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), sha256_hex(v)))
    .collect()
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

pub(super) fn write_stats(ctx: &Ctx) -> Result<PipelineStats, CliError> {
    let mut stats = compute_stats(&ctx.out).map_err(data_err)?;
    if let Some(k) = ctx.cfg.stats.rare_group {
        stats = stats.with_rare_group(k);
    }
    stats.write(&ctx.path(STATS_FILE)).map_err(data_err)?;
    Ok(stats)
}

pub fn emit(ctx: &mut Ctx) -> Result<(), CliError> {
    if ctx.state.is_done(Stage::Emit)
        && ctx.path(ANNOTATIONS_FILE).exists()
        && ctx.path(MANIFEST_FILE).exists()
    {
        ctx.progress.stage_done("emit", json!({"skipped": true}));
        return Ok(());
    }
    let mut scenes: Vec<(SceneFile, PathBuf)> = Vec::new();
    for dir in list_dir(&ctx.path(SCENES_DIR))? {
        let file = dir.join(SCENE_FILE);
        if file.exists() {
            scenes.push((read_json(&file)?, dir.join(IMAGE_FILE)));
        }
    }
    if scenes.is_empty() && ctx.cfg.dataset.size > 0 {
        return Err(CliError::Precondition(
            "no composed scenes found; run `gnv compose` first".into(),
        ));
    }
    ctx.progress.stage_start("emit", scenes.len() as u64);

    let mut builder = DatasetBuilder::new(&ctx.cfg.categories, &ctx.out).map_err(data_err)?;
    let mut copies = Vec::with_capacity(scenes.len());
    for (scene, png) in &scenes {
        let objects = scene
            .objects
            .iter()
            .map(|o| {
                Ok(SceneObject {
                    category_id: o.category_id,
                    mask: rle_decode(&o.segmentation)
                        .map_err(|e| CliError::Io(format!("scene {}: {e}", scene.id)))?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let image = builder
            .add_scene(scene.width, scene.height, &objects)
            .map_err(data_err)?;
        copies.push((png.clone(), builder.image_path(&image), scene.id.clone()));
    }
    let copied = ctx.par_map(&copies, |(src, dst, id): &(PathBuf, PathBuf, String)| {
        std::fs::copy(src, dst)
            .map(|_| ())
            .map_err(|e| CliError::io(src, e))
            .map(|()| id.clone())
    });
    for r in copied {
        ctx.progress.item("emit", &r?, "ok", None);
    }
    let ds = builder.finish().map_err(data_err)?;
    let stats = write_stats(ctx)?;

    let mut used = BTreeMap::new();
    used.insert(
        "ld_agent".to_string(),
        prompts::sha256_hex(&resolve_prompt(
            ctx,
            LD_AGENT_FILE,
            &ctx.cfg.prompts.ld_agent,
        )?),
    );
    used.insert(
        "validation_agent".to_string(),
        prompts::sha256_hex(&resolve_prompt(
            ctx,
            VALIDATION_AGENT_FILE,
            &ctx.cfg.prompts.validation_agent,
        )?),
    );
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: ctx.cfg.seed,
        config_hash: ctx.hash.clone(),
        prompts: used,
        shipped_prompts: shipped_prompt_hashes(),
        scene_seeds: scenes.iter().map(|(s, _)| (s.id.clone(), s.seed)).collect(),
        images: ds.images.len() as u64,
        annotations: ds.annotations.len() as u64,
    };
    write_json(&ctx.path(MANIFEST_FILE), &manifest)?;

    let violations = validate_dataset(&ctx.out).map_err(data_err)?;
    if !violations.is_empty() {
        return Err(CliError::Io(format!(
            "emitted dataset has {} violation(s), first: {}",
            violations.len(),
            violations[0]
        )));
    }
    ctx.progress.stage_done(
        "emit",
        json!({
            "images": ds.images.len(),
            "annotations": ds.annotations.len(),
            "invalid_rate": stats.invalid_rate,
            "annotations_file": ctx.path(ANNOTATIONS_FILE),
        }),
    );
    ctx.finish(Stage::Emit)
}

/// Recomputes `stats.json` from the verdict sidecars.
pub fn stats(ctx: &Ctx) -> Result<PipelineStats, CliError> {
    let stats = write_stats(ctx)?;
    ctx.progress
        .result(&serde_json::to_value(&stats).expect("stats serialize"));
    Ok(stats)
}

/// Validates an emitted dataset directory or annotations file.
pub fn check(path: &Path, progress: crate::progress::Progress) -> Result<Vec<Violation>, CliError> {
    if !path.exists() {
        return Err(CliError::Precondition(format!(
            "{} does not exist",
            path.display()
        )));
    }
    let violations = validate_dataset(path).map_err(data_err)?;
    let listed: Vec<serde_json::Value> = violations
        .iter()
        .map(|v| json!({"image_id": v.image_id, "annotation_id": v.annotation_id, "message": v.message}))
        .collect();
    progress.result(&json!({"violations": listed}));
    Ok(violations)
}
