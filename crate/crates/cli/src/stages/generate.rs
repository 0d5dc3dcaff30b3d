use gnv_core::backend::{Backend, ImageGenParams, ImageGenRequest};
use gnv_core::dataset::{AssetStatus, CategorySpec, INSTANCES_DIR};
use gnv_core::image::RgbaImage;
use gnv_core::mask::{alpha_to_mask, drop_specks, median_filter_alpha, BinaryMask};
use gnv_core::optimizer::{generate_downstream_prompt, OptimizeError};
use gnv_core::prompts;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::prompts::{resolve_prompt, LD_AGENT_FILE};
use super::{collect, derive_seed, item_id, write_json, Ctx, ItemError, ItemStatus};
use crate::config::{keys, Need};
use crate::error::CliError;
use crate::state::{Completed, Stage};

pub const BACKGROUNDS_DIR: &str = "backgrounds";
pub const META_FILE: &str = "meta.json";
pub const IMAGE_FILE: &str = "image.png";
pub const MASK_FILE: &str = "mask.png";

/// Written last in an instance directory; its presence marks the item done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub id: String,
    pub category_id: u32,
    pub category: String,
    pub status: AssetStatus,
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub mask_area: usize,
    pub min_area: usize,
    pub system_prompt_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundMeta {
    pub id: String,
    pub category_id: u32,
    pub setting: String,
    pub prompt: String,
    pub seed: u64,
}

/// Category text handed to the prompt agent.
fn label(c: &CategorySpec) -> String {
    if c.description.trim().is_empty() {
        c.name.clone()
    } else {
        format!("{} ({})", c.name, c.description.trim())
    }
}

fn prompt_err(e: OptimizeError) -> ItemError {
    match e {
        OptimizeError::Backend(b) => CliError::from(b).into(),
        OptimizeError::Io(e) => ItemError::Fatal(CliError::Io(e.to_string())),
        OptimizeError::Precondition(m) => ItemError::Fatal(CliError::Config(m)),
        other => ItemError::Skip(other.to_string()),
    }
}

/// Filters the alpha channel and clears it outside the kept mask.
pub fn clean_asset(
    img: &RgbaImage,
    kernel: u32,
    threshold: u8,
    min_area: usize,
) -> Result<(RgbaImage, BinaryMask), CliError> {
    let filtered = median_filter_alpha(img, kernel)
        .map_err(|e| CliError::Config(format!("median filter: {e}")))?;
    let mask = drop_specks(&alpha_to_mask(&filtered, threshold), min_area);
    let mut out = filtered;
    for (p, &keep) in out.pixels_mut().chunks_exact_mut(4).zip(mask.bits()) {
        if !keep {
            p[3] = 0;
        }
    }
    Ok((out, mask))
}

struct Workers<'a> {
    ctx: &'a Ctx,
    agent: &'a Backend,
    image: &'a Backend,
    system_prompt: &'a str,
    system_sha: String,
}

impl Workers<'_> {
    fn instance(&self, index: u64) -> Result<ItemStatus, ItemError> {
        let cfg = &self.ctx.cfg;
        let id = item_id(index);
        let dir = self.ctx.path(INSTANCES_DIR).join(&id);
        if dir.join(META_FILE).exists() {
            return Ok(ItemStatus::Skipped);
        }
        let cat = &cfg.categories[(index % cfg.categories.len() as u64) as usize];
        let prompt =
            generate_downstream_prompt(self.system_prompt, &label(cat), self.agent, &cfg.optimizer)
                .map_err(prompt_err)?;
        let seed = derive_seed(cfg.seed, "instance", index);
        let req = ImageGenRequest::new(&prompt, &cfg.generation, true, seed);
        let img = self.image.generate_image(&req).map_err(CliError::from)?;
        let min_area = cfg.filter.min_area_for(img.width(), img.height());
        let (asset, mask) = clean_asset(
            &img,
            cfg.filter.median_kernel,
            cfg.filter.alpha_threshold,
            min_area,
        )?;
        let status = if mask.is_blank() {
            AssetStatus::Degenerate
        } else {
            AssetStatus::Generated
        };

        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (name, im) in [(IMAGE_FILE, &asset), (MASK_FILE, &mask.to_rgba())] {
            let p = dir.join(name);
            im.save_png(&p).map_err(|e| CliError::io(&p, e))?;
        }
        let meta = InstanceMeta {
            id,
            category_id: cat.id,
            category: cat.name.clone(),
            status,
            prompt,
            seed,
            width: img.width(),
            height: img.height(),
            mask_area: mask.area(),
            min_area,
            system_prompt_sha256: self.system_sha.clone(),
        };
        write_json(&dir.join(META_FILE), &meta)?;
        Ok(match status {
            AssetStatus::Generated => ItemStatus::Done,
            AssetStatus::Degenerate => ItemStatus::Degenerate,
        })
    }

    fn background(
        &self,
        index: u64,
        cat: &CategorySpec,
        setting: &str,
        k: u32,
    ) -> Result<ItemStatus, ItemError> {
        let cfg = &self.ctx.cfg;
        let dir = self.ctx.path(BACKGROUNDS_DIR);
        let id = background_id(cat.id, setting, k);
        let meta_path = dir.join(format!("{id}.json"));
        if meta_path.exists() {
            return Ok(ItemStatus::Skipped);
        }
        let prompt = prompts::background_prompt(&cat.name, setting);
        let seed = derive_seed(cfg.seed, "background", index);
        let params = ImageGenParams {
            width: cfg.dataset.image_size,
            height: cfg.dataset.image_size,
            ..cfg.generation.clone()
        };
        let img = self
            .image
            .generate_image(&ImageGenRequest::new(&prompt, &params, false, seed))
            .map_err(CliError::from)?;
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let png = dir.join(format!("{id}.png"));
        img.save_png(&png).map_err(|e| CliError::io(&png, e))?;
        let meta = BackgroundMeta {
            id,
            category_id: cat.id,
            setting: setting.into(),
            prompt,
            seed,
        };
        write_json(&meta_path, &meta)?;
        Ok(ItemStatus::Done)
    }
}

pub fn background_id(category_id: u32, setting: &str, k: u32) -> String {
    let slug: String = setting
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    format!("c{category_id:04}_{slug}_{k}")
}

/// Generates `count` instances (default from the config) and the backgrounds.
pub fn generate(ctx: &mut Ctx, count: Option<u64>) -> Result<(), CliError> {
    let n = count.unwrap_or_else(|| ctx.cfg.instance_count());
    let agent = ctx.cfg.backend(keys::AGENT, None, Need::Chat)?;
    let image = ctx.cfg.backend(keys::IMAGE, None, Need::Image)?;
    let system_prompt = resolve_prompt(ctx, LD_AGENT_FILE, &ctx.cfg.prompts.ld_agent)?;
    let bg_jobs: Vec<(u64, CategorySpec, String, u32)> = {
        let b = &ctx.cfg.backgrounds;
        let mut jobs = Vec::new();
        for c in &ctx.cfg.categories {
            for s in &b.settings {
                for k in 0..b.per_category {
                    jobs.push((jobs.len() as u64, c.clone(), s.clone(), k));
                }
            }
        }
        jobs
    };
    ctx.progress
        .stage_start("generate", n + bg_jobs.len() as u64);

    let (tally, bg_tally, completed) = {
        let w = Workers {
            ctx,
            agent: &agent,
            image: &image,
            system_sha: prompts::sha256_hex(&system_prompt),
            system_prompt: &system_prompt,
        };
        let completed = Completed::default();
        let indices: Vec<u64> = (0..n).collect();
        let results = ctx.par_map(&indices, |&i| {
            let r = w.instance(i);
            if r.is_ok() {
                completed.add(&item_id(i));
            }
            (item_id(i), r)
        });
        let tally = collect(ctx, Stage::Generate, results)?;
        let bg_results = ctx.par_map(&bg_jobs, |(i, c, s, k)| {
            let id = background_id(c.id, s, *k);
            let r = w.background(*i, c, s, *k);
            if r.is_ok() {
                completed.add(&id);
            }
            (id, r)
        });
        let bg_tally = collect(ctx, Stage::Generate, bg_results)?;
        (tally, bg_tally, completed)
    };
    completed.merge_into(&mut ctx.state, Stage::Generate);
    ctx.state.save(&ctx.out)?;
    ctx.progress.stage_done(
        "generate",
        json!({"instances": tally, "backgrounds": bg_tally}),
    );

    let all = tally.total() + bg_tally.total();
    if all > 0 && tally.failed + bg_tally.failed == all {
        return Err(CliError::Backend("every generation request failed".into()));
    }
    if tally.failed + bg_tally.failed == 0 {
        ctx.finish(Stage::Generate)?;
    }
    Ok(())
}
