use std::collections::{BTreeMap, HashSet};

use super::bbox::{bbox_from_mask, Padding};
use crate::data_synth::{generate_samples, rgb_to_hsv, DatasetConfig, StyleSpec};
use crate::error::{Error, Result};
use crate::image::Image;

/// Image and style-text feature maps with unit-norm outputs of a common dimension.
pub trait Embedder: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_style(&self, style: &StyleSpec) -> Result<Vec<f64>>;
}

pub fn unit_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

const HUE_BINS: usize = 6;
pub const RAW_FEATURES: usize = HUE_BINS + 14;

fn near(v: f64, target: f64) -> bool {
    (v - target).abs() <= 1.5 / 255.0
}

/// Hand-crafted colour, edge, block-structure, and palette statistics.
pub fn raw_features(image: &Image) -> Result<Vec<f64>> {
    let (h, w, c) = image.shape();
    if h < 2 || w < 2 || c != 3 {
        return Err(Error::Shape(format!("embedder needs an RGB image of at least 2x2, got {h}x{w}x{c}")));
    }
    let n = (h * w) as f64;
    let mut hue = [0.0; HUE_BINS];
    let (mut s_sum, mut s_sq, mut v_sum, mut v_sq) = (0.0, 0.0, 0.0, 0.0);
    let (mut gray, mut binary, mut levels, mut white, mut black) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut saturated = 0.0;
    let mut colors = HashSet::new();
    let mut luma = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(y, x);
            let (hh, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            hue[((hh / 360.0 * HUE_BINS as f64) as usize).min(HUE_BINS - 1)] += s;
            s_sum += s;
            s_sq += s * s;
            v_sum += v;
            v_sq += v * v;
            if s < 0.08 {
                gray += 1.0;
            }
            if p.iter().all(|&ch| near(ch, 0.0) || near(ch, 1.0)) {
                binary += 1.0;
            }
            if p.iter().all(|&ch| near(ch, 0.0) || near(ch, 0.5) || near(ch, 1.0)) {
                levels += 1.0;
            }
            if s < 0.08 && v > 0.95 {
                white += 1.0;
            }
            if v < 0.05 {
                black += 1.0;
            }
            if s > 0.99 && v > 0.05 {
                saturated += 1.0;
            }
            colors.insert([p[0], p[1], p[2]].map(|ch| (ch * 255.0).round() as u8));
            luma[y * w + x] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
    }
    let mut edges = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let gx = luma[y * w + x + 1] - luma[y * w + x];
            let gy = luma[(y + 1) * w + x] - luma[y * w + x];
            if gx.hypot(gy) > 0.1 {
                edges += 1.0;
            }
        }
    }
    let edges = edges / ((h - 1) * (w - 1)) as f64;

    // 4-pixel grid alignment: share of neighbour changes that fall on cell
    // borders, best phase (0.25 for unaligned content).
    let same = |a: usize, b: usize| image.pixel(a / w, a % w) == image.pixel(b / w, b % w);
    let mut periodic: f64 = 0.25;
    for phase in 0..4 {
        let on_border = |i: usize| (i + 4 - phase) % 4 == 3;
        let (mut border, mut total) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w - 1 {
                if !same(y * w + x, y * w + x + 1) {
                    total += 1.0;
                    if on_border(x) {
                        border += 1.0;
                    }
                }
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                if !same(y * w + x, (y + 1) * w + x) {
                    total += 1.0;
                    if on_border(y) {
                        border += 1.0;
                    }
                }
            }
        }
        if total > 0.0 {
            periodic = periodic.max(border / total);
        }
    }

    // Share of exactly constant 4×4 cells, best phase.
    let mut blocky: f64 = 0.0;
    for py in 0..4 {
        for px in 0..4 {
            let (mut flat, mut cells) = (0.0, 0.0);
            for y0 in (py..h.saturating_sub(3)).step_by(4) {
                for x0 in (px..w.saturating_sub(3)).step_by(4) {
                    cells += 1.0;
                    let first = image.pixel(y0, x0);
                    if (y0..y0 + 4).all(|y| (x0..x0 + 4).all(|x| image.pixel(y, x) == first)) {
                        flat += 1.0;
                    }
                }
            }
            if cells > 0.0 {
                blocky = blocky.max(flat / cells);
            }
        }
    }

    let s_mean = s_sum / n;
    let v_mean = v_sum / n;
    let mut f: Vec<f64> = hue.iter().map(|x| x / n).collect();
    f.extend([
        s_mean,
        (s_sq / n - s_mean * s_mean).max(0.0).sqrt(),
        v_mean,
        (v_sq / n - v_mean * v_mean).max(0.0).sqrt(),
        gray / n,
        binary / n,
        levels / n,
        white / n,
        black / n,
        saturated / n,
        edges,
        periodic,
        blocky,
        colors.len() as f64 / n,
    ]);
    Ok(f)
}

/// Statistics embedder standardized on a seeded calibration set; style
/// embeddings are per-style prototypes of calibration crops.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsEmbedder {
    pub seed: u64,
    mean: Vec<f64>,
    scale: Vec<f64>,
    prototypes: BTreeMap<String, Vec<f64>>,
}

impl StatsEmbedder {
    pub const CALIBRATION_SCENES: usize = 48;

    /// Calibrates on pseudo-GT crops from `CALIBRATION_SCENES` seeded scenes per style.
    pub fn calibrate(seed: u64) -> Result<Self> {
        let config = DatasetConfig {
            seed,
            scenes: Self::CALIBRATION_SCENES,
            heldout_scenes: 0,
            ..DatasetConfig::default()
        };
        let styles = crate::data_synth::StyleSet::builtin(config.styles)?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (_, s) in generate_samples(&config)? {
            let rect = bbox_from_mask(&s.mask, Padding::default())?;
            rows.push((s.style_id, raw_features(&rect.crop(&s.target)?)?));
        }
        let d = RAW_FEATURES;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for (_, r) in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for (_, r) in &rows {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale: Vec<f64> = scale.iter().map(|v| 1.0 / v.sqrt().max(1e-6)).collect();
        let mut emb = Self {
            seed,
            mean,
            scale,
            prototypes: BTreeMap::new(),
        };
        for spec in styles.iter() {
            let mut acc = vec![0.0; d];
            for (sid, r) in &rows {
                if *sid == spec.style_id {
                    for (a, v) in acc.iter_mut().zip(emb.standardize(r)) {
                        *a += v;
                    }
                }
            }
            emb.prototypes.insert(spec.name().to_string(), unit_normalize(acc));
        }
        Ok(emb)
    }

    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

impl Embedder for StatsEmbedder {
    fn id(&self) -> String {
        format!("stats-v1/seed={}", self.seed)
    }

    fn dim(&self) -> usize {
        RAW_FEATURES
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(unit_normalize(self.standardize(&raw_features(image)?)))
    }

    fn embed_style(&self, style: &StyleSpec) -> Result<Vec<f64>> {
        self.prototypes
            .get(style.name())
            .cloned()
            .ok_or_else(|| Error::UnknownStyle {
                id: style.style_id,
                count: self.prototypes.len(),
            })
    }
}
