//! Scene synthesis: random placement of validated instances on a background,
//! z-ordered pasting, optional harmonization and visible-mask bookkeeping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendEndpoint, BackendError};
use crate::image::RgbaImage;
use crate::mask::{mask_to_bbox, BinaryMask};

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("invalid placement policy: {0}")]
    BadPolicy(String),
    #[error("no instances to place")]
    NoInstances,
    #[error("every instance was skipped; no placement fits")]
    NoPlacementsPossible,
    #[error("placement references unknown instance {0:?}")]
    MissingAsset(String),
    #[error("instance {id:?} scales to {width}x{height}")]
    ShapeError { id: String, width: u32, height: u32 },
    #[error("instance {0:?} has an empty mask")]
    EmptyInstance(String),
    #[error("instance {id:?}: image and mask sizes differ")]
    SizeMismatch { id: String },
    #[error("harmonizer failed: {0}")]
    Harmonizer(#[from] BackendError),
}

pub type Result<T, E = CompositeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementPolicy {
    /// Inclusive `[min, max]` instance count per scene.
    pub instances_per_image: [u32; 2],
    /// Inclusive `[min, max]` instance height as a fraction of canvas height.
    pub scale_range: [f64; 2],
    pub max_pairwise_iou: f64,
    pub min_visible_fraction: f64,
    pub max_attempts: u32,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        Self {
            instances_per_image: [1, 6],
            scale_range: [0.2, 0.8],
            max_pairwise_iou: 0.3,
            min_visible_fraction: 0.25,
            max_attempts: 50,
        }
    }
}

impl PlacementPolicy {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(CompositeError::BadPolicy(m));
        let [lo, hi] = self.instances_per_image;
        if lo < 1 || lo > hi {
            return bad(format!("instances_per_image [{lo}, {hi}]"));
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("scale_range [{s0}, {s1}]"));
        }
        if !(0.0..=1.0).contains(&self.max_pairwise_iou) {
            return bad(format!("max_pairwise_iou {}", self.max_pairwise_iou));
        }
        if !(self.min_visible_fraction > 0.0 && self.min_visible_fraction <= 1.0) {
            return bad(format!(
                "min_visible_fraction {}",
                self.min_visible_fraction
            ));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        Ok(())
    }

    pub fn mean_instances(&self) -> f64 {
        (self.instances_per_image[0] + self.instances_per_image[1]) as f64 / 2.0
    }
}

/// A validated foreground cropped to its mask's bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub category_id: u32,
    pub image: RgbaImage,
    pub mask: BinaryMask,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        category_id: u32,
        image: &RgbaImage,
        mask: &BinaryMask,
    ) -> Result<Self> {
        let id = id.into();
        if image.width() != mask.width() || image.height() != mask.height() {
            return Err(CompositeError::SizeMismatch { id });
        }
        let b = mask_to_bbox(mask).map_err(|_| CompositeError::EmptyInstance(id.clone()))?;
        Ok(Self {
            image: image.crop(b.x, b.y, b.w, b.h),
            mask: mask.crop(b),
            id,
            category_id,
        })
    }
}

pub type AssetStore = BTreeMap<String, Instance>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub instance_id: String,
    /// Scaled size over cropped instance size.
    pub scale: f64,
    /// Top-left of the scaled instance; may be negative (partly off canvas).
    pub x: i64,
    pub y: i64,
    pub z: i32,
    pub width: u32,
    pub height: u32,
}

impl Placement {
    fn rect(&self) -> Rect {
        Rect {
            x0: self.x,
            y0: self.y,
            x1: self.x + self.width as i64,
            y1: self.y + self.height as i64,
        }
    }
}

#[derive(Clone, Copy)]
struct Rect {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl Rect {
    fn area(&self) -> i64 {
        (self.x1 - self.x0).max(0) * (self.y1 - self.y0).max(0)
    }

    fn intersect(&self, o: &Rect) -> Rect {
        Rect {
            x0: self.x0.max(o.x0),
            y0: self.y0.max(o.y0),
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
        }
    }

    fn iou(&self, o: &Rect) -> f64 {
        let inter = self.intersect(o).area();
        let union = self.area() + o.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Draws a placement list for one scene. Deterministic in `seed`.
///
/// Instances are shuffled and cycled to reach the drawn count. Each one is
/// rejection-sampled until its box keeps IoU at most `max_pairwise_iou` with
/// every accepted box and enough of it lies on the canvas; after
/// `max_attempts` misses it is skipped.
pub fn sample_placements(
    canvas: (u32, u32),
    instances: &[&Instance],
    policy: &PlacementPolicy,
    seed: u64,
) -> Result<Vec<Placement>> {
    policy.check()?;
    if instances.is_empty() {
        return Err(CompositeError::NoInstances);
    }
    let (cw, ch) = canvas;
    let canvas_rect = Rect {
        x0: 0,
        y0: 0,
        x1: cw as i64,
        y1: ch as i64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count =
        rng.random_range(policy.instances_per_image[0]..=policy.instances_per_image[1]) as usize;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);

    let mut placed: Vec<Placement> = Vec::new();
    for k in 0..count {
        let inst = instances[order[k % order.len()]];
        let (iw, ih) = (inst.mask.width() as f64, inst.mask.height() as f64);
        for _ in 0..policy.max_attempts {
            let frac = rng.random_range(policy.scale_range[0]..=policy.scale_range[1]);
            let scale = (frac * ch as f64 / ih).min(cw as f64 / iw);
            let w = ((iw * scale).round() as u32).max(1);
            let h = ((ih * scale).round() as u32).max(1);
            let x = rng.random_range(-(w as i64 / 2)..=cw as i64 - (w as i64 + 1) / 2);
            let y = rng.random_range(-(h as i64 / 2)..=ch as i64 - (h as i64 + 1) / 2);
            let cand = Placement {
                instance_id: inst.id.clone(),
                scale,
                x,
                y,
                z: placed.len() as i32,
                width: w,
                height: h,
            };
            let r = cand.rect();
            let on_canvas = r.intersect(&canvas_rect).area() as f64 / r.area() as f64;
            if on_canvas < policy.min_visible_fraction {
                continue;
            }
            if placed
                .iter()
                .all(|p| p.rect().iou(&r) <= policy.max_pairwise_iou)
            {
                placed.push(cand);
                break;
            }
        }
    }
    if placed.is_empty() {
        return Err(CompositeError::NoPlacementsPossible);
    }
    Ok(placed)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HarmonizerKind {
    Identity,
    /// Per-channel mean/std transfer from the background under the instance.
    #[default]
    ColorTransfer,
    External {
        endpoint: BackendEndpoint,
        #[serde(default)]
        fallback_to_identity: bool,
    },
}

/// A ready-to-use harmonizer; external ones hold a connected backend.
#[derive(Debug, Clone)]
pub enum Harmonizer {
    Identity,
    ColorTransfer,
    External {
        backend: Box<Backend>,
        fallback_to_identity: bool,
    },
}

impl Harmonizer {
    pub fn from_kind(kind: &HarmonizerKind) -> Result<Self, BackendError> {
        Ok(match kind {
            HarmonizerKind::Identity => Harmonizer::Identity,
            HarmonizerKind::ColorTransfer => Harmonizer::ColorTransfer,
            HarmonizerKind::External {
                endpoint,
                fallback_to_identity,
            } => Harmonizer::External {
                backend: Box::new(Backend::connect(endpoint)?),
                fallback_to_identity: *fallback_to_identity,
            },
        })
    }
}

fn channel_stats<'a>(pixels: impl Iterator<Item = &'a [u8]>) -> Option<([f64; 3], [f64; 3])> {
    let mut n = 0f64;
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for p in pixels {
        n += 1.0;
        for c in 0..3 {
            let v = p[c] as f64;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    if n == 0.0 {
        return None;
    }
    let mean = sum.map(|s| s / n);
    let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt());
    Some((mean, std))
}

/// Pixels with alpha at least this count as foreground for harmonization.
const FOREGROUND_ALPHA: u8 = 128;

fn color_transfer(pasted: &RgbaImage, context: &RgbaImage) -> RgbaImage {
    let fg = channel_stats(
        pasted
            .pixels()
            .chunks_exact(4)
            .filter(|p| p[3] >= FOREGROUND_ALPHA),
    );
    let bg = channel_stats(context.pixels().chunks_exact(4));
    let (Some((fm, fs)), Some((bm, bs))) = (fg, bg) else {
        return pasted.clone();
    };
    let gain = [0, 1, 2].map(|c| if fs[c] < 1e-6 { 1.0 } else { bs[c] / fs[c] });
    let mut out = pasted.clone();
    for p in out.pixels_mut().chunks_exact_mut(4) {
        for c in 0..3 {
            let v = (p[c] as f64 - fm[c]) * gain[c] + bm[c];
            p[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Adjusts a scaled instance to the background it lands on. `context` is
/// the same-sized background window under the instance.
pub fn harmonize(
    pasted: &RgbaImage,
    context: &RgbaImage,
    harmonizer: &Harmonizer,
) -> Result<RgbaImage> {
    match harmonizer {
        Harmonizer::Identity => Ok(pasted.clone()),
        Harmonizer::ColorTransfer => Ok(color_transfer(pasted, context)),
        Harmonizer::External {
            backend,
            fallback_to_identity,
        } => {
            let mut composite = context.clone();
            let mut mask = BinaryMask::empty(pasted.width(), pasted.height());
            for y in 0..pasted.height() {
                for x in 0..pasted.width() {
                    let p = pasted.get(x, y);
                    composite.put(x, y, blend(composite.get(x, y), p));
                    mask.set(x, y, p[3] >= FOREGROUND_ALPHA);
                }
            }
            match backend.harmonize(&composite, &mask.to_rgba()) {
                Ok(mut img) => {
                    for (o, p) in img
                        .pixels_mut()
                        .chunks_exact_mut(4)
                        .zip(pasted.pixels().chunks_exact(4))
                    {
                        o[3] = p[3];
                    }
                    Ok(img)
                }
                Err(e) if *fallback_to_identity => {
                    log::warn!("harmonizer failed, pasting unharmonized: {e}");
                    Ok(pasted.clone())
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn blend(bg: [u8; 4], fg: [u8; 4]) -> [u8; 4] {
    let a = fg[3] as u32;
    let mix = |f: u8, b: u8| ((f as u32 * a + b as u32 * (255 - a) + 127) / 255) as u8;
    [mix(fg[0], bg[0]), mix(fg[1], bg[1]), mix(fg[2], bg[2]), 255]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeScene {
    /// Alpha is ignored.
    pub background: RgbaImage,
    /// Ascending z.
    pub placements: Vec<Placement>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub image: RgbaImage,
    /// Canvas-sized scaled mask of each placement, clipped to the canvas.
    pub pasted: Vec<BinaryMask>,
    /// `pasted` minus every higher-z pasted mask.
    pub visible: Vec<BinaryMask>,
    /// Whether each placement survives the visibility rule and is annotated.
    pub annotated: Vec<bool>,
    /// Area of each scaled mask, including any off-canvas part.
    pub own_area: Vec<usize>,
}

/// Pastes every placement in z order and derives visible masks.
///
/// Only pixels inside an instance's scaled mask are touched; there the
/// instance is alpha-blended over whatever lies below. A placement whose
/// visible area falls under `min_visible_fraction` of its own scaled area is
/// left in the pixels but not annotated.
pub fn render(
    scene: &CompositeScene,
    assets: &AssetStore,
    harmonizer: &Harmonizer,
    min_visible_fraction: f64,
) -> Result<RenderedScene> {
    let (cw, ch) = (scene.background.width(), scene.background.height());
    let mut image = scene.background.clone();
    for p in image.pixels_mut().chunks_exact_mut(4) {
        p[3] = 255;
    }
    debug_assert!(scene.placements.windows(2).all(|w| w[0].z <= w[1].z));

    let mut pasted = Vec::with_capacity(scene.placements.len());
    let mut own_area = Vec::with_capacity(scene.placements.len());
    for pl in &scene.placements {
        let inst = assets
            .get(&pl.instance_id)
            .ok_or_else(|| CompositeError::MissingAsset(pl.instance_id.clone()))?;
        if pl.width == 0 || pl.height == 0 {
            return Err(CompositeError::ShapeError {
                id: pl.instance_id.clone(),
                width: pl.width,
                height: pl.height,
            });
        }
        let rgba = inst.image.resize_bilinear(pl.width, pl.height);
        let m = inst.mask.resize_nearest(pl.width, pl.height);
        let context = window(&scene.background, pl.x, pl.y, pl.width, pl.height);
        let rgba = harmonize(&rgba, &context, harmonizer)?;

        let mut on_canvas = BinaryMask::empty(cw, ch);
        for j in 0..pl.height {
            let cy = pl.y + j as i64;
            if cy < 0 || cy >= ch as i64 {
                continue;
            }
            for i in 0..pl.width {
                let cx = pl.x + i as i64;
                if cx < 0 || cx >= cw as i64 || !m.get(i, j) {
                    continue;
                }
                let (cx, cy) = (cx as u32, cy as u32);
                image.put(cx, cy, blend(image.get(cx, cy), rgba.get(i, j)));
                on_canvas.set(cx, cy, true);
            }
        }
        own_area.push(m.area());
        pasted.push(on_canvas);
    }

    let mut visible = vec![BinaryMask::empty(cw, ch); pasted.len()];
    let mut above = BinaryMask::empty(cw, ch);
    for k in (0..pasted.len()).rev() {
        let mut v = pasted[k].clone();
        v.subtract(&above);
        above.union_with(&pasted[k]);
        visible[k] = v;
    }
    let annotated = visible
        .iter()
        .zip(&own_area)
        .map(|(v, &own)| {
            let a = v.area();
            a > 0 && a as f64 >= min_visible_fraction * own as f64
        })
        .collect();

    Ok(RenderedScene {
        image,
        pasted,
        visible,
        annotated,
        own_area,
    })
}

/// `w`×`h` background window at (x, y), edges replicated where it leaves
/// the canvas.
fn window(bg: &RgbaImage, x: i64, y: i64, w: u32, h: u32) -> RgbaImage {
    let mut out = RgbaImage::filled(w, h, [0, 0, 0, 255]);
    let max_x = bg.width() as i64 - 1;
    let max_y = bg.height() as i64 - 1;
    for j in 0..h {
        let sy = (y + j as i64).clamp(0, max_y) as u32;
        for i in 0..w {
            let sx = (x + i as i64).clamp(0, max_x) as u32;
            let mut p = bg.get(sx, sy);
            p[3] = 255;
            out.put(i, j, p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(id: &str, side: u32, rgb: [u8; 3]) -> Instance {
        let img = RgbaImage::filled(side, side, [rgb[0], rgb[1], rgb[2], 255]);
        Instance::new(id, 1, &img, &BinaryMask::full(side, side)).unwrap()
    }

    fn bg(w: u32, h: u32) -> RgbaImage {
        RgbaImage::filled(w, h, [10, 20, 30, 255])
    }

    fn at(id: &str, x: i64, y: i64, z: i32, side: u32) -> Placement {
        Placement {
            instance_id: id.into(),
            scale: 1.0,
            x,
            y,
            z,
            width: side,
            height: side,
        }
    }

    #[test]
    fn defaults() {
        let p = PlacementPolicy::default();
        assert_eq!(p.instances_per_image, [1, 6]);
        assert_eq!(p.scale_range, [0.2, 0.8]);
        assert_eq!(
            (p.max_pairwise_iou, p.min_visible_fraction, p.max_attempts),
            (0.3, 0.25, 50)
        );
        p.check().unwrap();
    }

    #[test]
    fn instance_is_cropped_to_mask() {
        let img = RgbaImage::filled(10, 10, [1, 2, 3, 255]);
        let mut m = BinaryMask::empty(10, 10);
        m.set(2, 3, true);
        m.set(5, 4, true);
        let inst = Instance::new("a", 1, &img, &m).unwrap();
        assert_eq!((inst.mask.width(), inst.mask.height()), (4, 2));
        assert!(Instance::new("b", 1, &img, &BinaryMask::empty(10, 10)).is_err());
    }

    #[test]
    fn one_instance_one_placement() {
        let inst = square("a", 20, [200, 0, 0]);
        let policy = PlacementPolicy {
            instances_per_image: [1, 1],
            ..PlacementPolicy::default()
        };
        let ps = sample_placements((100, 100), &[&inst], &policy, 5).unwrap();
        assert_eq!(ps.len(), 1);
        assert!(ps[0].x < 100 && ps[0].y < 100 && ps[0].x + ps[0].width as i64 > 0);
    }

    #[test]
    fn same_seed_same_placements() {
        let a = square("a", 20, [200, 0, 0]);
        let b = square("b", 30, [0, 200, 0]);
        let p = PlacementPolicy::default();
        let x = sample_placements((128, 96), &[&a, &b], &p, 9).unwrap();
        assert_eq!(x, sample_placements((128, 96), &[&a, &b], &p, 9).unwrap());
    }

    #[test]
    fn zero_placements_render_background() {
        let scene = CompositeScene {
            background: bg(16, 16),
            placements: vec![],
            seed: 0,
        };
        let out = render(&scene, &AssetStore::new(), &Harmonizer::Identity, 0.25).unwrap();
        assert_eq!(out.image, bg(16, 16));
        assert!(out.visible.is_empty());
    }

    #[test]
    fn full_overlap_hides_lower() {
        let mut store = AssetStore::new();
        store.insert("a".into(), square("a", 8, [255, 0, 0]));
        store.insert("b".into(), square("b", 8, [0, 255, 0]));
        let scene = CompositeScene {
            background: bg(16, 16),
            placements: vec![at("a", 4, 4, 0, 8), at("b", 4, 4, 1, 8)],
            seed: 0,
        };
        let out = render(&scene, &store, &Harmonizer::Identity, 0.25).unwrap();
        assert!(out.visible[0].is_blank());
        assert_eq!(out.visible[1].area(), 64);
        assert_eq!(out.annotated, vec![false, true]);
        assert_eq!(out.image.get(5, 5), [0, 255, 0, 255]);
        assert_eq!(out.image.get(0, 0), [10, 20, 30, 255]);
    }

    #[test]
    fn missing_asset() {
        let scene = CompositeScene {
            background: bg(16, 16),
            placements: vec![at("nope", 0, 0, 0, 4)],
            seed: 0,
        };
        assert!(matches!(
            render(&scene, &AssetStore::new(), &Harmonizer::Identity, 0.25),
            Err(CompositeError::MissingAsset(_))
        ));
    }

    #[test]
    fn color_transfer_shifts_mean() {
        let patch = RgbaImage::filled(8, 8, [100, 100, 100, 255]);
        let ctx = RgbaImage::filled(8, 8, [150, 150, 150, 255]);
        let out = harmonize(&patch, &ctx, &Harmonizer::ColorTransfer).unwrap();
        assert!(out
            .pixels()
            .chunks_exact(4)
            .all(|p| p == [150, 150, 150, 255]));
    }

    #[test]
    fn color_transfer_fixed_point() {
        let mut img = RgbaImage::filled(8, 8, [0, 0, 0, 255]);
        for (i, p) in img.pixels_mut().chunks_exact_mut(4).enumerate() {
            p[0] = (i * 3) as u8;
            p[1] = (255 - i * 2) as u8;
            p[2] = (i * 7 % 256) as u8;
        }
        let out = harmonize(&img, &img, &Harmonizer::ColorTransfer).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }
}
