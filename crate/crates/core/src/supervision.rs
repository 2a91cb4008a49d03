//! Style-token attention aggregation and the focus / cover supervision losses.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, SoftMask};
use crate::model::{AttentionGradient, AttentionRecord};

/// Floor added to the target mask before normalizing it.
pub const MASK_EPS: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 10.0;

/// Mean image-to-style-token attention over layers, heads, and style tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleAttentionMap {
    pub height: usize,
    pub width: usize,
    /// Row-major over the token grid.
    pub values: Vec<f64>,
    pub style_id: Option<usize>,
    pub layers: Vec<usize>,
    pub heads: usize,
    pub style_tokens: usize,
}

impl StyleAttentionMap {
    pub fn with_style(mut self, style_id: usize) -> Self {
        self.style_id = Some(style_id);
        self
    }

    /// Binary map thresholded at its median (cells `>=` the median are on).
    pub fn median_threshold(&self) -> Vec<bool> {
        let mut sorted = self.values.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        self.values.iter().map(|&v| v >= median).collect()
    }

    /// Writes an 8-bit grayscale PNG min-max scaled per map, plus a `.txt`
    /// sidecar holding the scale so raw values can be recovered.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        let data = self
            .values
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        Image::new(self.height, self.width, 1, data)?.save_png(path)?;
        let mut side = String::new();
        let _ = writeln!(side, "min {lo:e}");
        let _ = writeln!(side, "max {hi:e}");
        let _ = writeln!(side, "pixel = round(255 * (value - min) / (max - min))");
        let side_path = path.with_extension("txt");
        std::fs::write(&side_path, side).map_err(|e| Error::io(&side_path, e))
    }
}

/// `Z / ΣZ` after adding `eps` to every cell.
pub fn normalize_distribution(z: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::InvalidInput(format!("epsilon {eps} must be finite and non-negative")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distribution input".into()));
    }
    if z.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("distribution input must be non-negative".into()));
    }
    let total: f64 = z.iter().map(|v| v + eps).sum();
    if total <= 0.0 {
        return Err(Error::EmptyRegion("cannot normalize a zero-mass grid".into()));
    }
    Ok(z.iter().map(|v| (v + eps) / total).collect())
}

/// Averages the image-query → style-key slice of every layer in `layers`.
pub fn aggregate_style_attention(
    records: &[AttentionRecord],
    layers: &[usize],
    style_positions: &[usize],
    grid: (usize, usize),
) -> Result<StyleAttentionMap> {
    if style_positions.is_empty() {
        return Err(Error::InvalidInput("style token set is empty".into()));
    }
    if layers.is_empty() {
        return Err(Error::InvalidInput("supervision layer set is empty".into()));
    }
    let cells = grid.0 * grid.1;
    let mut values = vec![0.0; cells];
    let mut heads = None;
    for &layer in layers {
        let rec = records
            .iter()
            .find(|r| r.layer == layer)
            .ok_or_else(|| Error::InvalidInput(format!("no attention record for layer {layer}")))?;
        if rec.layout.image != cells {
            return Err(Error::Shape(format!(
                "layer {layer} has {} image tokens, grid has {cells}",
                rec.layout.image
            )));
        }
        if let Some(&k) = style_positions.iter().find(|&&k| k >= rec.layout.text) {
            return Err(Error::InvalidInput(format!("style position {k} outside text rows")));
        }
        let h = rec.heads();
        if *heads.get_or_insert(h) != h {
            return Err(Error::Shape("layers disagree on head count".into()));
        }
        let rows = rec.layout.image_rows();
        for head in 0..h {
            let a = rec.scores.index_axis(ndarray::Axis(0), head);
            for (p, row) in rows.clone().enumerate() {
                let r = a.row(row);
                values[p] += style_positions.iter().map(|&k| r[k]).sum::<f64>();
            }
        }
    }
    let heads = heads.unwrap_or(0);
    let norm = (layers.len() * heads * style_positions.len()) as f64;
    for v in &mut values {
        *v /= norm;
    }
    Ok(StyleAttentionMap {
        height: grid.0,
        width: grid.1,
        values,
        style_id: None,
        layers: layers.to_vec(),
        heads,
        style_tokens: style_positions.len(),
    })
}

/// Soft target mask with the focus temperature and cover contrast factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTarget {
    pub mask: SoftMask,
    pub tau: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl SupervisionTarget {
    pub fn new(mask: SoftMask, tau: f64, alpha: f64) -> Result<Self> {
        Self::with_eps(mask, tau, alpha, MASK_EPS)
    }

    pub fn with_eps(mask: SoftMask, tau: f64, alpha: f64, eps: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config(format!("tau {tau} must be finite and positive")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("alpha {alpha} must be finite and positive")));
        }
        if mask.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("target mask values must lie in [0, 1]".into()));
        }
        if mask.sum() <= 0.0 {
            return Err(Error::EmptyRegion("target mask has no mass".into()));
        }
        Ok(Self {
            mask,
            tau,
            alpha,
            eps,
        })
    }

    fn check(&self, m_hat: &[f64]) -> Result<()> {
        if m_hat.len() != self.mask.data.len() {
            return Err(Error::Shape(format!(
                "attention map has {} cells, mask has {}",
                m_hat.len(),
                self.mask.data.len()
            )));
        }
        if m_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention map".into()));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `KL(softmax(M̂/τ) ‖ norm(M + ε))` over the flattened grid.
pub fn focus_loss(m_hat: &[f64], target: &SupervisionTarget) -> Result<LossGrad> {
    target.check(m_hat)?;
    let q = normalize_distribution(&target.mask.data, target.eps)?;
    let tau = target.tau;
    let max = m_hat.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_z = max / tau + m_hat.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
    let log_p: Vec<f64> = m_hat.iter().map(|v| v / tau - log_z).collect();
    let mut value = 0.0;
    let mut ratio = Vec::with_capacity(q.len());
    for (lp, qi) in log_p.iter().zip(&q) {
        let r = lp - qi.ln();
        value += lp.exp() * r;
        ratio.push(r);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("focus loss".into()));
    }
    // ∂KL/∂z_i = p_i (ln p_i − ln q_i − KL), with z = M̂/τ.
    let grad = log_p
        .iter()
        .zip(&ratio)
        .map(|(lp, r)| lp.exp() * (r - value) / tau)
        .collect();
    Ok(LossGrad {
        value: value.max(0.0),
        grad,
    })
}

/// Mean over cells of BCE-with-logits on `α·M̂` against the soft mask.
pub fn cover_loss(m_hat: &[f64], target: &SupervisionTarget) -> Result<LossGrad> {
    target.check(m_hat)?;
    let n = m_hat.len() as f64;
    let alpha = target.alpha;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(m_hat.len());
    for (&m, &y) in m_hat.iter().zip(&target.mask.data) {
        let z = alpha * m;
        // both pieces are non-negative, so nothing cancels
        let linear = if z >= 0.0 { z * (1.0 - y) } else { -z * y };
        value += linear + (-z.abs()).exp().ln_1p();
        let sig = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        grad.push(alpha * (sig - y) / n);
    }
    value /= n;
    if !value.is_finite() {
        return Err(Error::NonFinite("cover loss".into()));
    }
    Ok(LossGrad { value, grad })
}

/// Packages a map-space gradient for [`crate::model::DiffusionTransformer::backward`].
pub fn attention_gradient(
    map: &StyleAttentionMap,
    style_positions: &[usize],
    map_grad: Vec<f64>,
) -> AttentionGradient {
    AttentionGradient {
        layers: map.layers.clone(),
        style_positions: style_positions.to_vec(),
        map_grad,
    }
}

/// Intersection-over-union of two equally sized binary grids; two empty grids score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
