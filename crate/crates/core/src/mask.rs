//! Pixel-level mask geometry: alpha denoising, binarization, connected
//! components, boxes and the COCO run-length codec.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::image::RgbaImage;

pub const DEFAULT_MEDIAN_KERNEL: u32 = 15;
pub const DEFAULT_ALPHA_THRESHOLD: u8 = 128;
/// Speck-removal threshold as a fraction of image area.
pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.001;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("median kernel {kernel} must be odd and within 1..={max}")]
    BadKernel { kernel: u32, max: u32 },
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("rle counts sum to {sum}, expected {expected}")]
    BadCounts { sum: u64, expected: u64 },
    #[error("rle run {index} is zero; only the first run may be empty")]
    ZeroRun { index: usize },
    #[error("mask buffer has {actual} entries, expected {expected}")]
    BadLength { expected: usize, actual: usize },
}

#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, area={})",
            self.width,
            self.height,
            self.area()
        )
    }
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(MaskError::BadLength {
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_blank(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        assert!(self.same_shape(other));
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        assert!(self.same_shape(other));
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        assert!(self.same_shape(other));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn subtract(&mut self, other: &BinaryMask) {
        assert!(self.same_shape(other));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !b;
        }
    }

    pub fn crop(&self, bbox: Bbox) -> BinaryMask {
        let mut out = BinaryMask::empty(bbox.w, bbox.h);
        for y in 0..bbox.h {
            for x in 0..bbox.w {
                out.set(x, y, self.get(bbox.x + x, bbox.y + y));
            }
        }
        out
    }

    /// Nearest-neighbour resample, pixel-center aligned.
    pub fn resize_nearest(&self, w: u32, h: u32) -> BinaryMask {
        let mut out = BinaryMask::empty(w, h);
        for y in 0..h {
            let sy = (((y as u64 * 2 + 1) * self.height as u64) / (h as u64 * 2)) as u32;
            for x in 0..w {
                let sx = (((x as u64 * 2 + 1) * self.width as u64) / (w as u64 * 2)) as u32;
                out.set(
                    x,
                    y,
                    self.get(sx.min(self.width - 1), sy.min(self.height - 1)),
                );
            }
        }
        out
    }

    /// Grayscale 0/255 PNG-ready plane.
    pub fn to_luma(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub fn to_rgba(&self) -> RgbaImage {
        let px = self
            .bits
            .iter()
            .flat_map(|&b| if b { [255u8; 4] } else { [0, 0, 0, 255] })
            .collect();
        RgbaImage::new(self.width, self.height, px).expect("sized buffer")
    }

    /// Reads a mask back from an image written by [`BinaryMask::to_rgba`]
    /// (any channel-0 value ≥ 128 counts as set).
    pub fn from_rgba(img: &RgbaImage) -> BinaryMask {
        let bits = img.pixels().chunks_exact(4).map(|p| p[0] >= 128).collect();
        BinaryMask {
            width: img.width(),
            height: img.height(),
            bits,
        }
    }
}

/// Axis-aligned box, top-left origin. Serialized as COCO `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bbox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Bbox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }
}

impl Serialize for Bbox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y, self.w, self.h].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Bbox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        // Float boxes from third-party tools are accepted when integral.
        let v = <[f64; 4]>::deserialize(d)?;
        if v.iter().any(|c| *c < 0.0 || c.fract() != 0.0) {
            return Err(serde::de::Error::custom(
                "bbox entries must be non-negative integers",
            ));
        }
        Ok(Bbox {
            x: v[0] as u32,
            y: v[1] as u32,
            w: v[2] as u32,
            h: v[3] as u32,
        })
    }
}

/// Uncompressed COCO RLE: column-major runs alternating 0s and 1s, starting
/// with a (possibly empty) run of 0s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RleWire {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl Serialize for RleMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RleWire {
            size: [self.height, self.width],
            counts: self.counts.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RleMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = RleWire::deserialize(d)?;
        Ok(RleMask {
            height: w.size[0],
            width: w.size[1],
            counts: w.counts,
        })
    }
}

impl RleMask {
    /// Number of foreground pixels, read off the odd runs.
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| c as u64)
            .sum()
    }
}

/// Replaces the alpha channel with its `kernel`×`kernel` median, replicating
/// edge pixels. RGB bytes are copied through untouched.
pub fn median_filter_alpha(image: &RgbaImage, kernel: u32) -> Result<RgbaImage, MaskError> {
    let max = image.width().min(image.height());
    if kernel == 0 || kernel.is_multiple_of(2) || kernel > max {
        return Err(MaskError::BadKernel { kernel, max });
    }
    if kernel == 1 {
        return Ok(image.clone());
    }
    let w = image.width() as i64;
    let h = image.height() as i64;
    let alpha = image.alpha_plane();
    let at = |x: i64, y: i64| -> u8 {
        let cx = x.clamp(0, w - 1);
        let cy = y.clamp(0, h - 1);
        alpha[(cy * w + cx) as usize]
    };
    let r = (kernel / 2) as i64;
    // index of the median within the sorted window
    let half = (kernel * kernel) / 2;
    let mut out = image.clone();
    let px = out.pixels_mut();

    for y in 0..h {
        let mut hist = [0u32; 256];
        for dy in -r..=r {
            for dx in -r..=r {
                hist[at(dx, y + dy) as usize] += 1;
            }
        }
        // Huang's running median: `below` counts window values < `med`.
        let mut med: usize = 0;
        let mut below: u32 = 0;
        let settle = |hist: &[u32; 256], med: &mut usize, below: &mut u32| {
            while *below > half {
                *med -= 1;
                *below -= hist[*med];
            }
            while *below + hist[*med] <= half {
                *below += hist[*med];
                *med += 1;
            }
        };
        settle(&hist, &mut med, &mut below);
        px[(y * w * 4 + 3) as usize] = med as u8;

        for x in 1..w {
            let out_col = x - r - 1;
            let in_col = x + r;
            for dy in -r..=r {
                let old = at(out_col, y + dy) as usize;
                hist[old] -= 1;
                if old < med {
                    below -= 1;
                }
                let new = at(in_col, y + dy) as usize;
                hist[new] += 1;
                if new < med {
                    below += 1;
                }
            }
            settle(&hist, &mut med, &mut below);
            px[((y * w + x) * 4 + 3) as usize] = med as u8;
        }
    }
    Ok(out)
}

/// Bit set iff alpha ≥ `threshold`.
pub fn alpha_to_mask(image: &RgbaImage, threshold: u8) -> BinaryMask {
    let bits = image
        .pixels()
        .chunks_exact(4)
        .map(|p| p[3] >= threshold)
        .collect();
    BinaryMask {
        width: image.width(),
        height: image.height(),
        bits,
    }
}

/// One 8-connected region of a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<u32>,
    pub bbox: Bbox,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn to_mask(&self, width: u32, height: u32) -> BinaryMask {
        let mut m = BinaryMask::empty(width, height);
        for &i in &self.pixels {
            m.bits[i as usize] = true;
        }
        m
    }
}

/// 8-connected components sorted by area (descending); ties keep scan order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let w = mask.width as i64;
    let h = mask.height as i64;
    let mut seen = vec![false; mask.bits.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push(i as u32);
            let x = i as i64 % w;
            let y = i as i64 / w;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        let bbox = pixel_bbox(&pixels, mask.width);
        out.push(Component { pixels, bbox });
    }
    out.sort_by_key(|c| std::cmp::Reverse(c.area()));
    out
}

fn pixel_bbox(pixels: &[u32], width: u32) -> Bbox {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for &i in pixels {
        let (x, y) = (i % width, i / width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    Bbox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    }
}

/// Removes every component whose area is below `min_area`.
pub fn drop_specks(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    if min_area == 0 {
        return mask.clone();
    }
    let mut out = BinaryMask::empty(mask.width, mask.height);
    for c in connected_components(mask) {
        if c.area() >= min_area {
            for &i in &c.pixels {
                out.bits[i as usize] = true;
            }
        }
    }
    out
}

pub fn default_min_area(width: u32, height: u32) -> usize {
    (DEFAULT_MIN_AREA_FRACTION * width as f64 * height as f64).ceil() as usize
}

/// Tightest box around the set pixels.
pub fn mask_to_bbox(mask: &BinaryMask) -> Result<Bbox, MaskError> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let mut any = false;
    for y in 0..mask.height {
        let row = &mask.bits[(y * mask.width) as usize..((y + 1) * mask.width) as usize];
        let Some(first) = row.iter().position(|&b| b) else {
            continue;
        };
        let last = row.iter().rposition(|&b| b).unwrap_or(first);
        any = true;
        x0 = x0.min(first as u32);
        x1 = x1.max(last as u32);
        y0 = y0.min(y);
        y1 = y;
    }
    if !any {
        return Err(MaskError::EmptyMask);
    }
    Ok(Bbox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let b = mask.get(x, y);
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask {
        width: mask.width,
        height: mask.height,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    let expected = rle.width as u64 * rle.height as u64;
    let sum: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if sum != expected {
        return Err(MaskError::BadCounts { sum, expected });
    }
    if let Some(index) = rle.counts.iter().skip(1).position(|&c| c == 0) {
        return Err(MaskError::ZeroRun { index: index + 1 });
    }
    let mut mask = BinaryMask::empty(rle.width, rle.height);
    let h = rle.height as u64;
    let mut pos = 0u64;
    for (i, &c) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + c as u64 {
                mask.set((p / h) as u32, (p % h) as u32, true);
            }
        }
        pos += c as u64;
    }
    Ok(mask)
}
