//! Seeded procedural images served by the mock image backend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::RgbaImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// One shaded ellipse on a transparent field.
    Disk,
    /// Two well separated ellipses.
    TwoDisks,
    /// Fully transparent.
    Empty,
    /// A disk whose alpha is 255 everywhere.
    Opaque,
    /// Opaque background: vertical gradient with a few flat boxes.
    Scene,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rgb: [f64; 3],
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, r: f64) -> Self {
        let stretch: f64 = rng.random_range(0.75..1.25);
        Ellipse {
            cx,
            cy,
            a: r * stretch,
            b: r / stretch,
            rgb: [
                rng.random_range(40.0..230.0),
                rng.random_range(40.0..230.0),
                rng.random_range(40.0..230.0),
            ],
        }
    }

    /// (alpha, shaded rgb) at pixel center (x, y).
    fn sample(&self, x: f64, y: f64) -> (f64, [f64; 3]) {
        let nx = (x - self.cx) / self.a;
        let ny = (y - self.cy) / self.b;
        let d = (nx * nx + ny * ny).sqrt();
        // signed distance to the rim in pixels, roughly
        let edge = (1.0 - d) * self.a.min(self.b);
        let alpha = ((edge + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0;
        let shade = 0.7 + 0.3 * (1.0 - d.min(1.0)) - 0.1 * nx;
        let rgb = self.rgb.map(|c| (c * shade).clamp(0.0, 255.0));
        (alpha, rgb)
    }
}

pub fn render(kind: Generator, width: u32, height: u32, seed: u64, specks: u32) -> RgbaImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let side = w.min(h);
    let mut img = RgbaImage::filled(width, height, [0, 0, 0, 0]);

    let shapes: Vec<Ellipse> = match kind {
        Generator::Empty => Vec::new(),
        Generator::Scene => return scene(&mut rng, width, height),
        Generator::Disk | Generator::Opaque => {
            let r = side * rng.random_range(0.22..0.32);
            let cx = w / 2.0 + side * rng.random_range(-0.08..0.08);
            let cy = h / 2.0 + side * rng.random_range(-0.08..0.08);
            vec![Ellipse::random(&mut rng, cx, cy, r)]
        }
        Generator::TwoDisks => {
            let r = side * rng.random_range(0.12..0.17);
            let cy = h / 2.0 + side * rng.random_range(-0.1..0.1);
            vec![
                Ellipse::random(&mut rng, w * 0.27, cy, r),
                Ellipse::random(&mut rng, w * 0.73, cy, r),
            ]
        }
    };

    let fill = shapes.first().map(|s| s.rgb).unwrap_or([0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut out = [fill[0], fill[1], fill[2], 0.0];
            for s in &shapes {
                let (a, rgb) = s.sample(px, py);
                if a > out[3] {
                    out = [rgb[0], rgb[1], rgb[2], a];
                }
            }
            if kind == Generator::Opaque {
                out[3] = 255.0;
            }
            img.put(x, y, out.map(|v| v.round() as u8));
        }
    }

    if kind != Generator::Opaque {
        // isolated alpha noise: lone opaque dots outside, pin holes inside
        for _ in 0..specks {
            let x = rng.random_range(0..width);
            let y = rng.random_range(0..height);
            let mut p = img.get(x, y);
            p[3] = if p[3] > 127 { 0 } else { 255 };
            img.put(x, y, p);
        }
    }
    img
}

fn scene(rng: &mut ChaCha8Rng, width: u32, height: u32) -> RgbaImage {
    let top: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(60.0..220.0));
    let bottom: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(30.0..200.0));
    let mut img = RgbaImage::filled(width, height, [0, 0, 0, 255]);
    for y in 0..height {
        let t = y as f64 / (height.max(2) - 1) as f64;
        let c = [0, 1, 2].map(|i| (top[i] * (1.0 - t) + bottom[i] * t).round() as u8);
        for x in 0..width {
            img.put(x, y, [c[0], c[1], c[2], 255]);
        }
    }
    if width < 30 || height < 30 {
        return img;
    }
    let boxes = rng.random_range(2..6);
    for _ in 0..boxes {
        let bw = rng.random_range(width / 10..width / 3);
        let bh = rng.random_range(height / 10..height / 3);
        let x0 = rng.random_range(0..width - bw);
        let y0 = rng.random_range(0..height - bh);
        let c = [0, 1, 2].map(|_| rng.random_range(20u8..235));
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                img.put(x, y, [c[0], c[1], c[2], 255]);
            }
        }
    }
    img
}
