//! Deterministic procedural stylization filters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleKind {
    PixelArt,
    Cyberpunk,
    Expressionism,
    LineArt,
}

impl StyleKind {
    pub const ALL: [StyleKind; 4] = [
        StyleKind::PixelArt,
        StyleKind::Cyberpunk,
        StyleKind::Expressionism,
        StyleKind::LineArt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StyleKind::PixelArt => "pixel-art",
            StyleKind::Cyberpunk => "cyberpunk",
            StyleKind::Expressionism => "expressionism",
            StyleKind::LineArt => "line-art",
        }
    }

    pub fn from_name(name: &str) -> Option<StyleKind> {
        StyleKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Per-style numeric knobs. Only the fields relevant to a style are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub block_size: usize,
    pub hue_shift_deg: f64,
    pub saturation_boost: f64,
    pub posterize_levels: usize,
    pub contrast: f64,
    pub edge_threshold: f64,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            block_size: 4,
            hue_shift_deg: 160.0,
            saturation_boost: 1.8,
            posterize_levels: 3,
            contrast: 1.4,
            edge_threshold: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: usize,
    pub kind: StyleKind,
    pub params: StyleParams,
}

impl StyleSpec {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

/// The ordered set of styles; `style_id` indexes into it and into the LoRA experts.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleSet {
    styles: Vec<StyleSpec>,
}

impl StyleSet {
    /// The first `count` of the four built-in styles, with default parameters.
    pub fn builtin(count: usize) -> Result<Self> {
        if count == 0 || count > StyleKind::ALL.len() {
            return Err(Error::Config(format!(
                "style count must be in 1..=4, got {count}"
            )));
        }
        Ok(Self {
            styles: StyleKind::ALL[..count]
                .iter()
                .enumerate()
                .map(|(style_id, &kind)| StyleSpec {
                    style_id,
                    kind,
                    params: StyleParams::default(),
                })
                .collect(),
        })
    }

    pub fn from_specs(styles: Vec<StyleSpec>) -> Result<Self> {
        for (i, s) in styles.iter().enumerate() {
            if s.style_id != i {
                return Err(Error::Config(format!(
                    "style ids must be dense; position {i} has id {}",
                    s.style_id
                )));
            }
            if styles[..i].iter().any(|o| o.kind == s.kind) {
                return Err(Error::Config(format!("duplicate style {}", s.name())));
            }
        }
        if styles.is_empty() {
            return Err(Error::Config("empty style set".into()));
        }
        Ok(Self { styles })
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn get(&self, style_id: usize) -> Result<&StyleSpec> {
        self.styles.get(style_id).ok_or(Error::UnknownStyle {
            id: style_id,
            count: self.styles.len(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &StyleSpec> {
        self.styles.iter()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.styles.iter().map(|s| s.name()).collect()
    }
}

/// Applies `style` to the whole image. Output stays in `[0, 1]`.
pub fn apply_style(image: &Image, style: &StyleSpec) -> Result<Image> {
    if !image.is_unit_range() {
        return Err(Error::InvalidInput(
            "image intensities must lie in [0, 1]".into(),
        ));
    }
    let p = &style.params;
    let out = match style.kind {
        StyleKind::PixelArt => pixelate(image, p.block_size)?,
        StyleKind::Cyberpunk => hue_rotate(image, p.hue_shift_deg, p.saturation_boost),
        StyleKind::Expressionism => posterize(image, p.posterize_levels, p.contrast)?,
        StyleKind::LineArt => edge_map(image, p.edge_threshold),
    };
    Ok(out.clamp_unit())
}

/// Replaces each `block × block` tile with its per-channel mean. Edge tiles may be smaller.
pub fn pixelate(image: &Image, block: usize) -> Result<Image> {
    if block == 0 {
        return Err(Error::Config("pixel-art block size must be ≥ 1".into()));
    }
    let (h, w, c) = image.shape();
    let mut out = image.clone();
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let ys = by..(by + block).min(h);
            let xs = bx..(bx + block).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for ch in 0..c {
                // Offsetting by the first value keeps constant blocks bit-exact.
                let first = image.get(by, bx, ch);
                let mut sum = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        sum += image.get(y, x, ch) - first;
                    }
                }
                let mean = first + sum / n;
                for y in ys.clone() {
                    for x in xs.clone() {
                        out.set(y, x, ch, mean);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
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
    (r + m, g + m, b + m)
}

/// Fixed hue rotation plus saturation boost. Grayscale inputs receive a neon floor saturation.
pub fn hue_rotate(image: &Image, shift_deg: f64, saturation_boost: f64) -> Image {
    let (h, w, c) = image.shape();
    if c != 3 {
        return image.clone();
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(y, x);
            let (hue, sat, val) = rgb_to_hsv(px[0], px[1], px[2]);
            let sat = (sat * saturation_boost + 0.35).min(1.0);
            let val = (val * 1.1 + 0.1).min(1.0);
            let (r, g, b) = hsv_to_rgb(hue + shift_deg, sat, val);
            out.set(y, x, 0, r);
            out.set(y, x, 1, g);
            out.set(y, x, 2, b);
        }
    }
    out
}

/// Contrast stretch around 0.5 followed by quantization to `levels` values per channel.
pub fn posterize(image: &Image, levels: usize, contrast: f64) -> Result<Image> {
    if levels < 2 {
        return Err(Error::Config("posterize needs at least 2 levels".into()));
    }
    let k = (levels - 1) as f64;
    let mut out = image.clone();
    for v in out.data_mut() {
        let stretched = ((*v - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
        *v = (stretched * k).round() / k;
    }
    Ok(out)
}

/// Dark Sobel edges on a white canvas, replicated to every channel.
pub fn edge_map(image: &Image, threshold: f64) -> Image {
    let (h, w, c) = image.shape();
    let luma = |y: usize, x: usize| -> f64 {
        let px = image.pixel(y, x);
        if c >= 3 {
            0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
        } else {
            px[0]
        }
    };
    let at = |y: isize, x: isize| luma(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize);
    let mut out = Image::filled(h, w, c, 1.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let mag = (gx * gx + gy * gy).sqrt() / 4.0;
            if mag > threshold {
                for ch in 0..c {
                    out.set(y as usize, x as usize, ch, 0.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| ((y * w + x) as f64 + c as f64) / (h * w + 3) as f64)
    }

    #[test]
    fn pixel_art_of_constant_is_identity() {
        let img = Image::filled(16, 16, 3, 0.3);
        let s = StyleSet::builtin(4).unwrap();
        assert_eq!(apply_style(&img, s.get(0).unwrap()).unwrap(), img);
    }

    #[test]
    fn pixel_art_is_idempotent() {
        let img = ramp(12, 8);
        let s = StyleSet::builtin(4).unwrap();
        let once = apply_style(&img, s.get(0).unwrap()).unwrap();
        let twice = apply_style(&once, s.get(0).unwrap()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn pixel_art_ramp_block_means() {
        let img = Image::from_fn(8, 8, 1, |y, x, _| (y * 8 + x) as f64 / 63.0);
        let out = pixelate(&img, 4).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut sum = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        sum += img.get(by * 4 + y, bx * 4 + x, 0);
                    }
                }
                let mean = sum / 16.0;
                for y in 0..4 {
                    for x in 0..4 {
                        assert_eq!(out.get(by * 4 + y, bx * 4 + x, 0), mean);
                    }
                }
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range_and_are_deterministic() {
        let img = ramp(16, 16);
        let s = StyleSet::builtin(4).unwrap();
        for spec in s.iter() {
            let a = apply_style(&img, spec).unwrap();
            let b = apply_style(&img, spec).unwrap();
            assert!(a.is_unit_range(), "{}", spec.name());
            assert_eq!(a.to_u8(), b.to_u8());
        }
    }

    #[test]
    fn line_art_is_grayscale_and_binary() {
        let img = Image::from_fn(16, 16, 3, |y, x, c| if (4..12).contains(&y) && (4..12).contains(&x) { 0.9 } else { 0.1 * c as f64 });
        let out = edge_map(&img, 0.08);
        for y in 0..16 {
            for x in 0..16 {
                let p = out.pixel(y, x);
                assert!(p[0] == p[1] && p[1] == p[2]);
                assert!(p[0] == 0.0 || p[0] == 1.0);
            }
        }
        assert_eq!(out.get(8, 8, 0), 1.0);
        assert_eq!(out.get(4, 8, 0), 0.0);
    }

    #[test]
    fn posterize_emits_k_levels() {
        let img = ramp(8, 8);
        let out = posterize(&img, 3, 1.0).unwrap();
        for v in out.data() {
            assert!([0.0, 0.5, 1.0].contains(v));
        }
    }

    #[test]
    fn unknown_style_id_errors() {
        let s = StyleSet::builtin(4).unwrap();
        assert!(matches!(s.get(4), Err(Error::UnknownStyle { id: 4, count: 4 })));
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.7), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }
}
