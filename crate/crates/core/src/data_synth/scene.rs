//! Procedural scenes: a background plus 1–4 flat-colored objects with exact masks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::seed::rng_for;

/// Object vocabulary. Each label owns a base hue so color identifies the object.
pub const LABELS: [&str; 12] = [
    "cat", "dog", "ball", "car", "tree", "house", "cup", "bird", "fish", "boat", "lamp", "chair",
];

const MIN_AREA: f64 = 0.01;
const MAX_AREA: f64 = 0.60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    NoiseTexture,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [
        BackgroundKind::Flat,
        BackgroundKind::Gradient,
        BackgroundKind::NoiseTexture,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub num_objects: usize,
    pub background: BackgroundKind,
}

impl SceneSpec {
    pub fn new(seed: u64, size: usize, num_objects: usize) -> Self {
        Self {
            seed,
            height: size,
            width: size,
            patch: 4,
            num_objects,
            background: BackgroundKind::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "canvas {}x{} is not a multiple of patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if !(1..=4).contains(&self.num_objects) {
            return Err(Error::Config(format!(
                "num_objects must be in 1..=4, got {}",
                self.num_objects
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("canvas must be at least 16x16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub label: String,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

fn label_hue(label_index: usize) -> f64 {
    label_index as f64 * 360.0 / LABELS.len() as f64
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn muted_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv(
        rng.random_range(0.0..360.0),
        rng.random_range(0.05..0.25),
        rng.random_range(0.35..0.75),
    )
}

fn paint_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (spec.height, spec.width);
    match spec.background {
        BackgroundKind::Flat => {
            let col = muted_color(rng);
            Image::from_fn(h, w, 3, |_, _, c| col[c])
        }
        BackgroundKind::Gradient => {
            let a = muted_color(rng);
            let b = muted_color(rng);
            let vertical = rng.random_bool(0.5);
            Image::from_fn(h, w, 3, |y, x, c| {
                let t = if vertical {
                    y as f64 / (h - 1) as f64
                } else {
                    x as f64 / (w - 1) as f64
                };
                a[c] * (1.0 - t) + b[c] * t
            })
        }
        BackgroundKind::NoiseTexture => {
            let base = muted_color(rng);
            let cell = 8usize;
            let gh = h / cell + 2;
            let gw = w / cell + 2;
            let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-0.12..0.12)).collect();
            let fine: Vec<f64> = (0..h * w).map(|_| rng.random_range(-0.03..0.03)).collect();
            Image::from_fn(h, w, 3, |y, x, c| {
                let fy = y as f64 / cell as f64;
                let fx = x as f64 / cell as f64;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                let g = |yy: usize, xx: usize| grid[yy * gw + xx];
                let v = g(iy, ix) * (1.0 - ty) * (1.0 - tx)
                    + g(iy, ix + 1) * (1.0 - ty) * tx
                    + g(iy + 1, ix) * ty * (1.0 - tx)
                    + g(iy + 1, ix + 1) * ty * tx;
                (base[c] + v + fine[y * w + x]).clamp(0.0, 1.0)
            })
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Shape> {
    let (hf, wf) = (h as f64, w as f64);
    let one = |rng: &mut ChaCha8Rng| -> Shape {
        if rng.random_bool(0.5) {
            let sh = rng.random_range(0.15..0.45) * hf;
            let sw = rng.random_range(0.15..0.45) * wf;
            let y0 = rng.random_range(0.0..(hf - sh));
            let x0 = rng.random_range(0.0..(wf - sw));
            Shape::Rect {
                y0,
                x0,
                y1: y0 + sh,
                x1: x0 + sw,
            }
        } else {
            let ry = rng.random_range(0.08..0.24) * hf;
            let rx = rng.random_range(0.08..0.24) * wf;
            Shape::Ellipse {
                cy: rng.random_range(ry..(hf - ry)),
                cx: rng.random_range(rx..(wf - rx)),
                ry,
                rx,
            }
        }
    };
    let first = one(rng);
    if rng.random_bool(0.25) {
        // union of two overlapping primitives
        let second = match first {
            Shape::Rect { y0, x0, y1, x1 } => Shape::Ellipse {
                cy: y0,
                cx: (x0 + x1) / 2.0,
                ry: ((y1 - y0) / 2.5).max(2.0),
                rx: ((x1 - x0) / 2.5).max(2.0),
            },
            Shape::Ellipse { cy, cx, ry, rx } => Shape::Rect {
                y0: cy,
                x0: cx - rx * 0.4,
                y1: (cy + ry * 1.4).min(hf),
                x1: cx + rx * 0.4,
            },
        };
        vec![first, second]
    } else {
        vec![first]
    }
}

/// Renders a scene. Deterministic in `spec.seed`; object masks are pairwise disjoint
/// and each covers between 1% and 60% of the canvas.
pub fn gen_scene(spec: &SceneSpec) -> Result<(Image, Vec<SceneObject>)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "scene", 0);
    let (h, w) = (spec.height, spec.width);
    let mut image = paint_background(spec, &mut rng);

    let mut label_ids: Vec<usize> = (0..LABELS.len()).collect();
    label_ids.shuffle(&mut rng);

    let mut occupied = Mask::empty(h, w);
    let mut objects = Vec::with_capacity(spec.num_objects);
    for &label_id in label_ids.iter().take(spec.num_objects) {
        let mut placed = None;
        for _ in 0..500 {
            let shapes = random_shape(&mut rng, h, w);
            let mask = Mask::from_fn(h, w, |y, x| {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                shapes.iter().any(|s| s.contains(py, px))
            });
            let frac = mask.area_fraction();
            if !(MIN_AREA..=MAX_AREA).contains(&frac) {
                continue;
            }
            // one-pixel gap keeps objects visually separate
            let grown = dilate(&mask);
            if grown.intersects(&occupied) {
                continue;
            }
            placed = Some(mask);
            break;
        }
        let mask = placed.ok_or_else(|| {
            Error::Config(format!(
                "could not place {} disjoint objects on a {h}x{w} canvas",
                spec.num_objects
            ))
        })?;
        let hue = label_hue(label_id) + rng.random_range(-8.0..8.0);
        let sat = rng.random_range(0.75..0.95);
        let val = rng.random_range(0.75..0.95);
        // Linear shading ramp along a random direction across the object.
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (dy, dx) = (angle.sin(), angle.cos());
        let proj = |y: usize, x: usize| y as f64 * dy + x as f64 * dx;
        let (lo, hi) = (0..h * w)
            .filter(|&i| mask.data()[i])
            .map(|i| proj(i / w, i % w))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p), b.max(p)));
        let span = (hi - lo).max(1.0);
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let t = (proj(y, x) - lo) / span;
                    let color = hsv(hue + 20.0 * (t - 0.5), sat, val * (1.0 - 0.45 * t));
                    for (c, &v) in color.iter().enumerate() {
                        image.set(y, x, c, v);
                    }
                }
            }
        }
        occupied = occupied.union(&mask);
        objects.push(SceneObject {
            label: LABELS[label_id].to_string(),
            mask,
        });
    }
    Ok((image, objects))
}

fn dilate(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        let ys = y.saturating_sub(1)..(y + 2).min(h);
        ys.into_iter().any(|yy| {
            (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| mask.get(yy, xx))
        })
    })
}
