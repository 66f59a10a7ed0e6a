//! Procedural image set for desk-scale training and reconstruction checks.
//!
//! Each image layers a smooth two-color gradient, a few filled shapes, an
//! optional stripe texture and mild noise, so the set covers flat regions,
//! edges and fine detail.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
        }
    }
}

/// One synthetic RGB image.
pub fn toy_image(rng: &mut impl Rng, height: usize, width: usize) -> Image {
    let (h, w) = (height as f32, width as f32);
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let shapes: Vec<(Shape, [f32; 3])> = (0..rng.random_range(1..=4))
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Disc {
                    cy: rng.random_range(0.0..h),
                    cx: rng.random_range(0.0..w),
                    r: rng.random_range(0.1..0.35) * h.min(w),
                }
            } else {
                let (y0, x0) = (rng.random_range(0.0..h * 0.8), rng.random_range(0.0..w * 0.8));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(0.15..0.5) * h,
                    x1: x0 + rng.random_range(0.15..0.5) * w,
                }
            };
            (shape, random_color(rng))
        })
        .collect();
    let stripes = rng.random_bool(0.5).then(|| {
        (
            rng.random_range(0.3f32..1.2),
            rng.random_range(0.0..std::f32::consts::TAU),
            rng.random_range(0.05f32..0.2),
        )
    });
    let noise = rng.random_range(0.0f32..0.04);
    Image::from_fn(height, width, |y, x| {
        let (yf, xf) = (y as f32, x as f32);
        let t = ((yf / h - 0.5) * dy + (xf / w - 0.5) * dx + 0.5).clamp(0.0, 1.0);
        let mut px = mix(c0, c1, t);
        for (shape, color) in &shapes {
            if shape.contains(yf, xf) {
                px = *color;
            }
        }
        if let Some((freq, phase, amp)) = stripes {
            let s = amp * (freq * (xf * dy - yf * dx) + phase).sin();
            px = px.map(|v| v + s);
        }
        px.map(|v| (v + noise * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0))
    })
}

/// Write `count` PNGs named `toy_000.png`, … into `dir` (created if missing).
pub fn write_toy_set(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        toy_image(&mut rng, height, width).save_png(dir.join(format!("toy_{i:03}.png")))?;
    }
    Ok(())
}
