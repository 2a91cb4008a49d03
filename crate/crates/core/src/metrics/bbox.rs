use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Margin added around the tight box on every side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// `max(4, ceil(fraction × side))` pixels, per axis.
    Fraction(f64),
    Fixed(usize),
}

impl Default for Padding {
    fn default() -> Self {
        Padding::Fraction(0.05)
    }
}

impl Padding {
    fn pixels(self, side: usize) -> usize {
        match self {
            Padding::Fraction(f) => ((f * side as f64).ceil() as usize).max(4),
            Padding::Fixed(p) => p,
        }
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..=self.bottom).contains(&y) && (self.left..=self.right).contains(&x)
    }

    pub fn crop(&self, image: &Image) -> Result<Image> {
        image.crop(self.top..self.bottom + 1, self.left..self.right + 1)
    }
}

/// Tight box around the mask, padded and clipped to the canvas.
pub fn bbox_from_mask(mask: &Mask, padding: Padding) -> Result<Rect> {
    let (h, w) = (mask.height(), mask.width());
    let mut tight: Option<Rect> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let r = tight.get_or_insert(Rect {
                    top: y,
                    left: x,
                    bottom: y,
                    right: x,
                });
                r.top = r.top.min(y);
                r.bottom = r.bottom.max(y);
                r.left = r.left.min(x);
                r.right = r.right.max(x);
            }
        }
    }
    let t = tight.ok_or_else(|| Error::EmptyRegion("mask has no positive pixels".into()))?;
    let py = padding.pixels(t.height());
    let px = padding.pixels(t.width());
    Ok(Rect {
        top: t.top.saturating_sub(py),
        left: t.left.saturating_sub(px),
        bottom: (t.bottom + py).min(h - 1),
        right: (t.right + px).min(w - 1),
    })
}
