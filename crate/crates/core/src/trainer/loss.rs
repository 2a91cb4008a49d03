use ndarray::Array3;

use crate::error::{Error, Result};
use crate::supervision::{cover_loss, focus_loss, SupervisionTarget};

/// Weighted objective with each component and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub diffusion: f64,
    pub focus: f64,
    pub cover: f64,
    pub total: f64,
    /// `∂L/∂ε̂`
    pub d_eps: Array3<f64>,
    /// `∂L/∂M̂` (weighted focus + cover terms).
    pub d_map: Vec<f64>,
}

pub fn weighted_total(diffusion: f64, focus: f64, cover: f64, lambda_focus: f64, lambda_cover: f64) -> f64 {
    diffusion + lambda_focus * focus + lambda_cover * cover
}

/// `mean((ε̂ − ε)²) + λ_f·L_focus + λ_c·L_cover`.
pub fn total_loss(
    eps_hat: &Array3<f64>,
    eps: &Array3<f64>,
    m_hat: &[f64],
    target: &SupervisionTarget,
    lambda_focus: f64,
    lambda_cover: f64,
) -> Result<LossBreakdown> {
    if eps_hat.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs noise {:?}",
            eps_hat.dim(),
            eps.dim()
        )));
    }
    let n = eps.len() as f64;
    let diff = eps_hat - eps;
    let diffusion = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if !diffusion.is_finite() {
        return Err(Error::NonFinite("diffusion loss".into()));
    }
    let f = focus_loss(m_hat, target)?;
    let c = cover_loss(m_hat, target)?;
    let total = weighted_total(diffusion, f.value, c.value, lambda_focus, lambda_cover);
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let d_map = f
        .grad
        .iter()
        .zip(&c.grad)
        .map(|(a, b)| lambda_focus * a + lambda_cover * b)
        .collect();
    Ok(LossBreakdown {
        diffusion,
        focus: f.value,
        cover: c.value,
        total,
        d_eps: diff * (2.0 / n),
        d_map,
    })
}
