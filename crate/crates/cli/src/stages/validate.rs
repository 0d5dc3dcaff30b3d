use gnv_core::backend::Backend;
use gnv_core::dataset::{AssetStatus, INSTANCES_DIR};
use gnv_core::image::RgbaImage;
use gnv_core::prompts::{self, substitute_category};
use gnv_core::validation::{validate_instance, ValidationError, ValidationVerdict};
use serde_json::json;

use super::generate::{InstanceMeta, IMAGE_FILE, META_FILE};
use super::prompts::{resolve_prompt, VALIDATION_AGENT_FILE};
use super::{collect, list_dir, read_json, Ctx, ItemError, ItemStatus};
use crate::config::{keys, Need};
use crate::error::CliError;
use crate::state::{Completed, Stage};

/// Metadata of every instance directory that finished generation.
pub(super) fn generated_instances(ctx: &Ctx) -> Result<Vec<InstanceMeta>, CliError> {
    let mut out = Vec::new();
    for p in list_dir(&ctx.path(INSTANCES_DIR))? {
        let meta = p.join(META_FILE);
        if p.is_dir() && meta.exists() {
            out.push(read_json(&meta)?);
        }
    }
    Ok(out)
}

fn validate_one(
    ctx: &Ctx,
    meta: &InstanceMeta,
    template: &str,
    vision: &Backend,
) -> Result<ItemStatus, ItemError> {
    let dir = ctx.path(INSTANCES_DIR);
    if ValidationVerdict::sidecar_path(&dir, &meta.id).exists() {
        return Ok(ItemStatus::Skipped);
    }
    let png = dir.join(&meta.id).join(IMAGE_FILE);
    let img = RgbaImage::load_png(&png).map_err(|e| CliError::io(&png, e))?;
    let system = substitute_category(template, &meta.category);
    let verdict = validate_instance(&img, &meta.category, &system, vision, &ctx.cfg.validator)
        .map_err(|e| match e {
            ValidationError::Backend(b) => ItemError::from(CliError::from(b)),
            other => ItemError::Fatal(CliError::Config(other.to_string())),
        })?;
    verdict
        .write_sidecar(&dir, &meta.id)
        .map_err(|e| CliError::io(&ValidationVerdict::sidecar_path(&dir, &meta.id), e))?;
    Ok(ItemStatus::Done)
}

pub fn validate(ctx: &mut Ctx) -> Result<(), CliError> {
    let metas = generated_instances(ctx)?;
    if metas.is_empty() {
        return Err(CliError::Precondition(format!(
            "no generated instances under {}; run `gnv generate` first",
            ctx.path(INSTANCES_DIR).display()
        )));
    }
    let todo: Vec<InstanceMeta> = metas
        .into_iter()
        .filter(|m| m.status == AssetStatus::Generated)
        .collect();
    let vision = ctx.cfg.backend(keys::VISION, None, Need::Vision)?;
    let template = resolve_prompt(
        ctx,
        VALIDATION_AGENT_FILE,
        &ctx.cfg.prompts.validation_agent,
    )?;
    if !template.contains(prompts::CATEGORY_PLACEHOLDER) {
        log::warn!(
            "validation prompt has no {} placeholder",
            prompts::CATEGORY_PLACEHOLDER
        );
    }
    ctx.progress.stage_start("validate", todo.len() as u64);

    let completed = Completed::default();
    let results = ctx.par_map(&todo, |m| {
        let r = validate_one(ctx, m, &template, &vision);
        if r.is_ok() {
            completed.add(&m.id);
        }
        (m.id.clone(), r)
    });
    let tally = collect(ctx, Stage::Validate, results)?;
    completed.merge_into(&mut ctx.state, Stage::Validate);
    ctx.state.save(&ctx.out)?;

    let stats = super::emit::write_stats(ctx)?;
    ctx.progress.stage_done(
        "validate",
        json!({"items": tally, "kept": stats.kept, "filtered": stats.filtered, "invalid_rate": stats.invalid_rate}),
    );
    if tally.total() > 0 && tally.failed == tally.total() {
        return Err(CliError::Backend("every validation request failed".into()));
    }
    if tally.failed == 0 {
        ctx.finish(Stage::Validate)?;
    }
    Ok(())
}
