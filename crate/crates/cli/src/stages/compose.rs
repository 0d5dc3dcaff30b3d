use std::collections::BTreeMap;

use gnv_core::compositor::{
    render, sample_placements, AssetStore, CompositeError, CompositeScene, Harmonizer, Instance,
    Placement,
};
use gnv_core::dataset::INSTANCES_DIR;
use gnv_core::fsutil::write_atomic;
use gnv_core::image::RgbaImage;
use gnv_core::mask::{rle_encode, BinaryMask, RleMask};
use gnv_core::validation::ValidationVerdict;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::generate::{BackgroundMeta, BACKGROUNDS_DIR, IMAGE_FILE, MASK_FILE};
use super::validate::generated_instances;
use super::{
    collect, derive_seed, item_id, list_dir, read_json, write_json, Ctx, ItemError, ItemStatus,
};
use crate::config::BackgroundMode;
use crate::error::CliError;
use crate::state::{Completed, Stage};

pub const SCENES_DIR: &str = "scenes";
pub const SCENE_FILE: &str = "scene.json";
/// Fresh placement draws tried before a scene is given up.
const PLACEMENT_TRIES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObjectFile {
    pub instance_id: String,
    pub category_id: u32,
    pub segmentation: RleMask,
}

/// Written after the scene image; its presence marks the scene done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub id: String,
    pub seed: u64,
    pub background: String,
    pub width: u32,
    pub height: u32,
    pub placements: Vec<Placement>,
    /// Annotated placements in z order, with their visible masks.
    pub objects: Vec<SceneObjectFile>,
}

struct Background {
    id: String,
    category_id: u32,
    image: RgbaImage,
}

fn load_kept(ctx: &Ctx) -> Result<AssetStore, CliError> {
    let metas = generated_instances(ctx)?;
    if metas.is_empty() {
        return Err(CliError::Precondition(
            "no generated instances; run `gnv generate` first".into(),
        ));
    }
    let dir = ctx.path(INSTANCES_DIR);
    let mut judged = 0;
    let mut store = AssetStore::new();
    for m in metas {
        let sidecar = ValidationVerdict::sidecar_path(&dir, &m.id);
        if !sidecar.exists() {
            continue;
        }
        judged += 1;
        let v = ValidationVerdict::read_sidecar(&sidecar).map_err(|e| CliError::io(&sidecar, e))?;
        if !v.is_keep() {
            continue;
        }
        let load = |name: &str| {
            let p = dir.join(&m.id).join(name);
            RgbaImage::load_png(&p).map_err(|e| CliError::io(&p, e))
        };
        let image = load(IMAGE_FILE)?;
        let mask = BinaryMask::from_rgba(&load(MASK_FILE)?);
        let inst = Instance::new(m.id.clone(), m.category_id, &image, &mask)
            .map_err(|e| CliError::Precondition(format!("instance {}: {e}", m.id)))?;
        store.insert(m.id, inst);
    }
    if judged == 0 {
        return Err(CliError::Precondition(
            "no validation verdicts found; run `gnv validate` first".into(),
        ));
    }
    if store.is_empty() {
        return Err(CliError::Precondition(format!(
            "NoValidInstances: all {judged} validated instance(s) were filtered out; nothing to compose"
        )));
    }
    Ok(store)
}

fn load_backgrounds(ctx: &Ctx) -> Result<Vec<Background>, CliError> {
    let side = ctx.cfg.dataset.image_size;
    let mut out = Vec::new();
    for p in list_dir(&ctx.path(BACKGROUNDS_DIR))? {
        if p.extension().is_some_and(|e| e == "json") {
            let meta: BackgroundMeta = read_json(&p)?;
            let png = p.with_extension("png");
            let mut image = RgbaImage::load_png(&png).map_err(|e| CliError::io(&png, e))?;
            if (image.width(), image.height()) != (side, side) {
                image = image.resize_bilinear(side, side);
            }
            out.push(Background {
                id: meta.id,
                category_id: meta.category_id,
                image,
            });
        }
    }
    if out.is_empty() {
        return Err(CliError::Precondition(
            "no backgrounds found; run `gnv generate` first".into(),
        ));
    }
    Ok(out)
}

struct Composer<'a> {
    ctx: &'a Ctx,
    assets: AssetStore,
    backgrounds: Vec<Background>,
    harmonizer: Harmonizer,
}

impl Composer<'_> {
    fn scene(&self, index: u64) -> Result<ItemStatus, ItemError> {
        let cfg = &self.ctx.cfg;
        let id = item_id(index);
        let dir = self.ctx.path(SCENES_DIR).join(&id);
        if dir.join(SCENE_FILE).exists() {
            return Ok(ItemStatus::Skipped);
        }
        let side = cfg.dataset.image_size;
        let seed = derive_seed(cfg.seed, "scene", index);
        let refs: Vec<&Instance> = self.assets.values().collect();
        let mut placements = None;
        for attempt in 0..PLACEMENT_TRIES {
            match sample_placements(
                (side, side),
                &refs,
                &cfg.policy,
                derive_seed(seed, "placement", attempt),
            ) {
                Ok(p) => {
                    placements = Some(p);
                    break;
                }
                Err(CompositeError::NoPlacementsPossible) => continue,
                Err(e) => return Err(ItemError::Fatal(CliError::Config(e.to_string()))),
            }
        }
        let placements = placements
            .ok_or_else(|| ItemError::Skip("no placement satisfies the policy".into()))?;

        let first_cat = self.assets[&placements[0].instance_id].category_id;
        let matched: Vec<&Background> = match cfg.backgrounds.mode {
            BackgroundMode::Independent => Vec::new(),
            BackgroundMode::Matched => self
                .backgrounds
                .iter()
                .filter(|b| b.category_id == first_cat)
                .collect(),
        };
        let pool: Vec<&Background> = if matched.is_empty() {
            self.backgrounds.iter().collect()
        } else {
            matched
        };
        let bg = pool[(derive_seed(seed, "background", 0) % pool.len() as u64) as usize];

        let scene = CompositeScene {
            background: bg.image.clone(),
            placements,
            seed,
        };
        let rendered = render(
            &scene,
            &self.assets,
            &self.harmonizer,
            cfg.policy.min_visible_fraction,
        )
        .map_err(|e| match e {
            CompositeError::Harmonizer(b) => ItemError::from(CliError::from(b)),
            other => ItemError::Fatal(CliError::Precondition(other.to_string())),
        })?;
        let objects = scene
            .placements
            .iter()
            .zip(&rendered.visible)
            .zip(&rendered.annotated)
            .filter(|(_, &keep)| keep)
            .map(|((p, mask), _)| SceneObjectFile {
                instance_id: p.instance_id.clone(),
                category_id: self.assets[&p.instance_id].category_id,
                segmentation: rle_encode(mask),
            })
            .collect();

        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let png = dir.join(IMAGE_FILE);
        let bytes = rendered
            .image
            .to_png_rgb()
            .map_err(|e| CliError::io(&png, e))?;
        write_atomic(&png, &bytes).map_err(|e| CliError::io(&png, e))?;
        let file = SceneFile {
            id,
            seed,
            background: bg.id.clone(),
            width: side,
            height: side,
            placements: scene.placements,
            objects,
        };
        write_json(&dir.join(SCENE_FILE), &file)?;
        Ok(ItemStatus::Done)
    }
}

pub fn compose(ctx: &mut Ctx) -> Result<(), CliError> {
    let assets = load_kept(ctx)?;
    let backgrounds = load_backgrounds(ctx)?;
    let harmonizer = Harmonizer::from_kind(&ctx.cfg.harmonizer)?;
    let n = ctx.cfg.dataset.size;
    ctx.progress.stage_start("compose", n);

    let per_category = assets
        .values()
        .fold(BTreeMap::<u32, u64>::new(), |mut m, a| {
            *m.entry(a.category_id).or_default() += 1;
            m
        });
    log::info!(
        "composing from {} kept instance(s) over {} categories",
        assets.len(),
        per_category.len()
    );

    let completed = Completed::default();
    let tally = {
        let c = Composer {
            ctx,
            assets,
            backgrounds,
            harmonizer,
        };
        let indices: Vec<u64> = (0..n).collect();
        let results = ctx.par_map(&indices, |&i| {
            let r = c.scene(i);
            if r.is_ok() {
                completed.add(&item_id(i));
            }
            (item_id(i), r)
        });
        collect(ctx, Stage::Compose, results)?
    };
    completed.merge_into(&mut ctx.state, Stage::Compose);
    ctx.state.save(&ctx.out)?;
    ctx.progress.stage_done("compose", json!({"scenes": tally}));
    if tally.total() > 0 && tally.failed == tally.total() {
        return Err(CliError::Precondition(
            "no scene could be composed; check the placement policy and harmonizer".into(),
        ));
    }
    if tally.failed == 0 {
        ctx.finish(Stage::Compose)?;
    }
    Ok(())
}
