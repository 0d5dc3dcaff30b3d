//! COCO instance-segmentation output, its checker, and run statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::{AssetStore, CompositeScene, RenderedScene};
use crate::fsutil::write_atomic;
use crate::image::{png_dimensions, ImageError, RgbaImage};
use crate::mask::{mask_to_bbox, rle_decode, rle_encode, Bbox, BinaryMask, RleMask};
use crate::validation::{Criterion, Outcome, ValidationVerdict};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("consistency: {0}")]
    Consistency(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: u32,
    pub name: String,
    /// Gloss appended to generation prompts, e.g. `orange (fruit of an orange tree)`.
    #[serde(default)]
    pub description: String,
}

pub fn check_categories(categories: &[CategorySpec]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut names = BTreeSet::new();
    for c in categories {
        if c.id == 0 {
            return Err(DatasetError::Consistency(format!(
                "category {:?} has id 0",
                c.name
            )));
        }
        if c.name.trim().is_empty() {
            return Err(DatasetError::Consistency(format!(
                "category {} has an empty name",
                c.id
            )));
        }
        if !ids.insert(c.id) {
            return Err(DatasetError::Consistency(format!(
                "duplicate category id {}",
                c.id
            )));
        }
        if !names.insert(c.name.as_str()) {
            return Err(DatasetError::Consistency(format!(
                "duplicate category name {:?}",
                c.name
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub segmentation: RleMask,
    pub bbox: Bbox,
    pub area: u64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CategorySpec>,
}

impl CocoDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// One annotated object of a finished scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub category_id: u32,
    pub mask: BinaryMask,
}

/// A rendered scene ready for output.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image: RgbaImage,
    pub objects: Vec<SceneObject>,
}

impl SceneRecord {
    /// Keeps the visible masks of annotated placements, in z order.
    pub fn from_render(
        rendered: RenderedScene,
        scene: &CompositeScene,
        assets: &AssetStore,
    ) -> Self {
        let objects = scene
            .placements
            .iter()
            .zip(rendered.visible)
            .zip(&rendered.annotated)
            .filter(|(_, &keep)| keep)
            .map(|((p, mask), _)| SceneObject {
                category_id: assets[&p.instance_id].category_id,
                mask,
            })
            .collect();
        SceneRecord {
            image: rendered.image,
            objects,
        }
    }
}

pub fn image_file_name(image_id: u64) -> String {
    format!("{image_id:06}.png")
}

/// Incremental COCO writer: scenes are registered one at a time and the
/// annotations file is written once by [`DatasetBuilder::finish`]. Callers
/// place each image file at [`DatasetBuilder::image_path`].
pub struct DatasetBuilder {
    out_dir: PathBuf,
    known: BTreeSet<u32>,
    ds: CocoDataset,
}

impl DatasetBuilder {
    pub fn new(categories: &[CategorySpec], out_dir: &Path) -> Result<Self> {
        check_categories(categories)?;
        let img_dir = out_dir.join(IMAGES_DIR);
        std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            known: categories.iter().map(|c| c.id).collect(),
            ds: CocoDataset {
                categories: categories.to_vec(),
                ..CocoDataset::default()
            },
        })
    }

    pub fn image_path(&self, image: &CocoImage) -> PathBuf {
        self.out_dir.join(IMAGES_DIR).join(&image.file_name)
    }

    /// Adds one image and its objects; ids continue densely from 1.
    pub fn add_scene(
        &mut self,
        width: u32,
        height: u32,
        objects: &[SceneObject],
    ) -> Result<CocoImage> {
        let image_id = self.ds.images.len() as u64 + 1;
        let mut occupied = BinaryMask::empty(width, height);
        let mut anns = Vec::with_capacity(objects.len());
        for obj in objects {
            let ann_id = (self.ds.annotations.len() + anns.len()) as u64 + 1;
            let fail = |m: &str| {
                DatasetError::Consistency(format!("image {image_id}, annotation {ann_id}: {m}"))
            };
            if !self.known.contains(&obj.category_id) {
                return Err(fail(&format!("unknown category {}", obj.category_id)));
            }
            if obj.mask.width() != width || obj.mask.height() != height {
                return Err(fail("mask size differs from image"));
            }
            let bbox = mask_to_bbox(&obj.mask).map_err(|_| fail("empty mask"))?;
            if obj.mask.intersects(&occupied) {
                return Err(fail("mask overlaps a sibling"));
            }
            occupied.union_with(&obj.mask);
            anns.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: obj.category_id,
                segmentation: rle_encode(&obj.mask),
                bbox,
                area: obj.mask.area() as u64,
                iscrowd: 0,
            });
        }
        let image = CocoImage {
            id: image_id,
            file_name: image_file_name(image_id),
            width,
            height,
        };
        self.ds.images.push(image.clone());
        self.ds.annotations.extend(anns);
        Ok(image)
    }

    pub fn finish(self) -> Result<CocoDataset> {
        let json_path = self.out_dir.join(ANNOTATIONS_FILE);
        let json = serde_json::to_string(&self.ds).expect("dataset serializes") + "\n";
        write_atomic(&json_path, json.as_bytes()).map_err(io_err(&json_path))?;
        Ok(self.ds)
    }
}

/// Writes `images/*.png` and `annotations.json` under `out_dir`.
///
/// Image and annotation ids are dense from 1 in input order. PNGs are
/// encoded in parallel; the JSON is written once at the end.
pub fn emit_dataset(
    scenes: &[SceneRecord],
    categories: &[CategorySpec],
    out_dir: &Path,
) -> Result<CocoDataset> {
    let mut builder = DatasetBuilder::new(categories, out_dir)?;
    let mut paths = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let img = builder.add_scene(scene.image.width(), scene.image.height(), &scene.objects)?;
        paths.push(builder.image_path(&img));
    }
    scenes
        .par_iter()
        .zip(&paths)
        .try_for_each(|(scene, path)| {
            let png = scene
                .image
                .to_png_rgb()
                .map_err(|source| DatasetError::Image {
                    path: path.clone(),
                    source,
                })?;
            write_atomic(path, &png).map_err(io_err(path))
        })?;
    builder.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation_id: Option<u64>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(a) = self.annotation_id {
            write!(f, "annotation {a}: ")?;
        } else if let Some(i) = self.image_id {
            write!(f, "image {i}: ")?;
        }
        f.write_str(&self.message)
    }
}

/// Re-checks a dataset on disk. `path` is the dataset directory or its
/// `annotations.json`. An empty list means valid.
pub fn validate_dataset(path: &Path) -> Result<Vec<Violation>> {
    let (dir, json) = if path.is_dir() {
        (path.to_path_buf(), path.join(ANNOTATIONS_FILE))
    } else {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let ds = CocoDataset::load(&json)?;
    let mut out = Vec::new();
    let mut v = |image_id: Option<u64>, annotation_id: Option<u64>, message: String| {
        out.push(Violation {
            image_id,
            annotation_id,
            message,
        })
    };

    if let Err(DatasetError::Consistency(m)) = check_categories(&ds.categories) {
        v(None, None, m);
    }
    let categories: BTreeSet<u32> = ds.categories.iter().map(|c| c.id).collect();

    let mut images: HashMap<u64, &CocoImage> = HashMap::new();
    for img in &ds.images {
        if images.insert(img.id, img).is_some() {
            v(Some(img.id), None, "duplicate image id".into());
        }
        let file = dir.join(IMAGES_DIR).join(&img.file_name);
        match png_dimensions(&file) {
            Ok(dims) if dims == (img.width, img.height) => {}
            Ok((w, h)) => v(
                Some(img.id),
                None,
                format!("file is {w}x{h}, record says {}x{}", img.width, img.height),
            ),
            Err(_) if !file.exists() => v(
                Some(img.id),
                None,
                format!("missing file {}", file.display()),
            ),
            Err(e) => v(
                Some(img.id),
                None,
                format!("unreadable file {}: {e}", file.display()),
            ),
        }
    }

    let mut ann_ids = BTreeSet::new();
    let mut occupied: HashMap<u64, BinaryMask> = HashMap::new();
    for a in &ds.annotations {
        let mut bad = |m: String| v(Some(a.image_id), Some(a.id), m);
        if !ann_ids.insert(a.id) {
            bad("duplicate annotation id".into());
        }
        if a.iscrowd != 0 {
            bad(format!("iscrowd is {}", a.iscrowd));
        }
        if !categories.contains(&a.category_id) {
            bad(format!("unknown category {}", a.category_id));
        }
        let Some(img) = images.get(&a.image_id) else {
            bad(format!("unknown image {}", a.image_id));
            continue;
        };
        if (a.segmentation.width, a.segmentation.height) != (img.width, img.height) {
            bad(format!(
                "segmentation size {}x{} differs from image {}x{}",
                a.segmentation.width, a.segmentation.height, img.width, img.height
            ));
            continue;
        }
        let mask = match rle_decode(&a.segmentation) {
            Ok(m) => m,
            Err(e) => {
                bad(format!("segmentation does not decode: {e}"));
                continue;
            }
        };
        let area = mask.area() as u64;
        if area == 0 {
            bad("empty mask".into());
            continue;
        }
        if a.area != area {
            bad(format!("area {} but mask has {area} pixels", a.area));
        }
        let bbox = mask_to_bbox(&mask).expect("nonempty");
        if a.bbox != bbox {
            bad(format!(
                "bbox {:?} but mask spans {:?}",
                [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
                [bbox.x, bbox.y, bbox.w, bbox.h]
            ));
        }
        let occ = occupied
            .entry(a.image_id)
            .or_insert_with(|| BinaryMask::empty(img.width, img.height));
        if mask.intersects(occ) {
            bad("mask overlaps an earlier annotation of the same image".into());
        }
        occ.union_with(&mask);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub generated: u64,
    pub kept: u64,
    pub filtered: u64,
}

impl Counts {
    fn add(&mut self, keep: bool) {
        self.generated += 1;
        if keep {
            self.kept += 1;
        } else {
            self.filtered += 1;
        }
    }

    pub fn invalid_rate(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.filtered as f64 / self.generated as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareGroup {
    pub categories: Vec<String>,
    pub counts: Counts,
    pub invalid_rate: f64,
}

/// Validation outcome totals for one run. `generated` counts instances that
/// reached the validation agent; degenerate assets are tallied separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub generated: u64,
    pub kept: u64,
    pub filtered: u64,
    pub invalid_rate: f64,
    pub per_category: BTreeMap<String, Counts>,
    pub per_criterion_failures: BTreeMap<Criterion, u64>,
    pub inconsistent: u64,
    pub unparseable: u64,
    pub degenerate: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rare: Option<RareGroup>,
}

impl PipelineStats {
    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a ValidationVerdict>) -> Self {
        let mut total = Counts::default();
        let mut per_category: BTreeMap<String, Counts> = BTreeMap::new();
        let mut per_criterion_failures: BTreeMap<Criterion, u64> =
            Criterion::ALL.iter().map(|&c| (c, 0)).collect();
        let (mut inconsistent, mut unparseable) = (0, 0);
        for v in verdicts {
            total.add(v.is_keep());
            per_category
                .entry(v.category.clone())
                .or_default()
                .add(v.is_keep());
            for r in &v.criteria {
                if r.outcome == Outcome::Fail {
                    *per_criterion_failures.entry(r.name).or_default() += 1;
                }
            }
            inconsistent += u64::from(!v.consistent);
            unparseable += u64::from(v.unparseable);
        }
        PipelineStats {
            generated: total.generated,
            kept: total.kept,
            filtered: total.filtered,
            invalid_rate: total.invalid_rate(),
            per_category,
            per_criterion_failures,
            inconsistent,
            unparseable,
            degenerate: 0,
            rare: None,
        }
    }

    /// Groups the `k` categories with the fewest generated instances
    /// (ties broken by name).
    pub fn with_rare_group(mut self, k: usize) -> Self {
        if k == 0 {
            self.rare = None;
            return self;
        }
        let mut cats: Vec<(&String, &Counts)> = self.per_category.iter().collect();
        cats.sort_by(|a, b| a.1.generated.cmp(&b.1.generated).then(a.0.cmp(b.0)));
        let chosen: Vec<(&String, &Counts)> = cats.into_iter().take(k).collect();
        let mut counts = Counts::default();
        for (_, c) in &chosen {
            counts.generated += c.generated;
            counts.kept += c.kept;
            counts.filtered += c.filtered;
        }
        self.rare = Some(RareGroup {
            categories: chosen.iter().map(|(n, _)| (*n).clone()).collect(),
            invalid_rate: counts.invalid_rate(),
            counts,
        });
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("stats serialize") + "\n";
        write_atomic(path, json.as_bytes()).map_err(io_err(path))
    }
}

/// Status recorded in an instance's `meta.json`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetStatus {
    Generated,
    /// Mask empty after filtering; never sent for validation.
    Degenerate,
}

/// Directory holding per-instance assets and verdict sidecars.
pub const INSTANCES_DIR: &str = "instances";

/// Aggregates `instances/*.verdict.json` under `run_dir`, plus the
/// degenerate count from `instances/*/meta.json`.
pub fn compute_stats(run_dir: &Path) -> Result<PipelineStats> {
    let dir = run_dir.join(INSTANCES_DIR);
    if !dir.exists() {
        return Ok(PipelineStats::from_verdicts([]));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io_err(&dir))?;
    entries.sort();

    let mut verdicts = Vec::new();
    let mut degenerate = 0;
    for path in entries {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if name.ends_with(".verdict.json") {
            verdicts.push(ValidationVerdict::read_sidecar(&path).map_err(|e| {
                DatasetError::Malformed {
                    path: path.clone(),
                    message: e.to_string(),
                }
            })?);
        } else if path.is_dir() {
            let meta = path.join("meta.json");
            if let Ok(text) = std::fs::read_to_string(&meta) {
                #[derive(Deserialize)]
                struct StatusOnly {
                    status: AssetStatus,
                }
                if let Ok(StatusOnly {
                    status: AssetStatus::Degenerate,
                }) = serde_json::from_str(&text)
                {
                    degenerate += 1;
                }
            }
        }
    }
    let mut stats = PipelineStats::from_verdicts(&verdicts);
    stats.degenerate = degenerate;
    Ok(stats)
}
