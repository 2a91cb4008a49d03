use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::step::PreparedSample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{sample_edit_with, seeded_noise, DiffusionTransformer, TokenizedPrompt};
use crate::seed::derive_seed;
use crate::supervision::{aggregate_style_attention, cover_loss, focus_loss, iou, StyleAttentionMap};

/// Timesteps used when probing attention localization.
pub const PROBE_TIMESTEPS: [usize; 3] = [25, 50, 75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub index: usize,
    pub style_id: usize,
    pub focus: f64,
    pub cover: f64,
    /// IoU of the median-thresholded map against the mask binarized at 0.5.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub rows: Vec<LocalizationRow>,
    pub mean_focus: f64,
    pub mean_cover: f64,
    pub mean_iou: f64,
}

/// One captured map of [`attention_evolution`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepMap {
    /// 1-based sampler step.
    pub step: usize,
    pub t: usize,
    pub map: StyleAttentionMap,
}

/// Runs the sampler and returns the edit plus the aggregated style attention
/// at each requested 1-based step, in request order.
#[allow(clippy::too_many_arguments)]
pub fn attention_evolution(
    model: &DiffusionTransformer,
    context: &Image,
    prompt: &TokenizedPrompt,
    style_id: usize,
    layers: &[usize],
    sampler_steps: usize,
    dump_steps: &[usize],
    seed: u64,
) -> Result<(Image, Vec<StepMap>)> {
    if dump_steps.is_empty() {
        return Err(Error::InvalidInput("no dump steps requested".into()));
    }
    if let Some(&s) = dump_steps.iter().find(|&&s| s == 0 || s > sampler_steps) {
        return Err(Error::InvalidInput(format!(
            "dump step {s} outside 1..={sampler_steps}"
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    if !dump_steps.iter().all(|s| seen.insert(*s)) {
        return Err(Error::InvalidInput("duplicate dump step".into()));
    }
    let cond = model.conditioning(context, prompt)?;
    let mut maps: Vec<Option<StepMap>> = vec![None; dump_steps.len()];
    let edited = sample_edit_with(model, context, prompt, style_id, sampler_steps, seed, true, |step, t, out| {
        if let Some(k) = dump_steps.iter().position(|&s| s == step) {
            let map = aggregate_style_attention(&out.records, layers, &cond.style_positions, cond.grid)?
                .with_style(style_id);
            maps[k] = Some(StepMap { step, t, map });
        }
        Ok(())
    })?;
    Ok((edited, maps.into_iter().map(|m| m.expect("every step visited")).collect()))
}

/// Attention losses and IoU per sample, averaged over `timesteps` with noise
/// seeded by `(seed, sample index, t)`.
pub fn evaluate_localization(
    model: &DiffusionTransformer,
    samples: &[PreparedSample],
    layers: &[usize],
    timesteps: &[usize],
    seed: u64,
) -> Result<LocalizationReport> {
    if samples.is_empty() || timesteps.is_empty() {
        return Err(Error::InvalidInput("localization needs samples and timesteps".into()));
    }
    let rows = samples
        .par_iter()
        .map(|s| {
            let (mut f, mut c, mut io) = (0.0, 0.0, 0.0);
            for &t in timesteps {
                let eps = seeded_noise(
                    s.x0.dim(),
                    derive_seed(seed, "localization", (s.index as u64) << 20 | t as u64),
                    "localization/noise",
                );
                let x_t = model.schedule.add_noise(&s.x0, &eps, t)?;
                let out = model.forward(&s.cond, &x_t, t, s.style_id, true)?;
                let map = aggregate_style_attention(&out.records, layers, &s.cond.style_positions, s.cond.grid)?;
                f += focus_loss(&map.values, &s.target)?.value;
                c += cover_loss(&map.values, &s.target)?.value;
                io += iou(&map.median_threshold(), &s.target.mask.binarize(0.5));
            }
            let n = timesteps.len() as f64;
            Ok(LocalizationRow {
                index: s.index,
                style_id: s.style_id,
                focus: f / n,
                cover: c / n,
                iou: io / n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(LocalizationReport {
        mean_focus: rows.iter().map(|r| r.focus).sum::<f64>() / n,
        mean_cover: rows.iter().map(|r| r.cover).sum::<f64>() / n,
        mean_iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
        rows,
    })
}
