//! Region style matching and background preservation metrics.

mod bbox;
mod embedder;
mod perceptual;
mod report;

pub use bbox::{bbox_from_mask, Padding, Rect};
pub use embedder::{cosine, raw_features, unit_normalize, Embedder, StatsEmbedder, RAW_FEATURES};
pub use perceptual::{
    masked_mse, masked_perceptual_distance, masked_perceptual_distance_map,
    PerceptualFeatureBank, FILTERS_PER_SCALE, SCALES,
};
pub use report::{
    heldout_samples, rse_report, rse_report_with, EditSettings, EvalConfig, MeanStd, RseAggregate,
    RseContext, RseMetadata, RseReport, RseRow,
};

use crate::data_synth::StyleSpec;
use crate::error::Result;
use crate::image::{Image, Mask};

/// `(1 + cos) / 2`, mapping cosine similarity onto [0, 1].
pub fn rsm_from_embeddings(image: &[f64], style: &[f64]) -> f64 {
    (1.0 + cosine(image, style)) / 2.0
}

/// Style match of the padded mask bounding-box crop of `edited`.
pub fn rsm_score(
    edited: &Image,
    mask: &Mask,
    style: &StyleSpec,
    embedder: &dyn Embedder,
    padding: Padding,
) -> Result<f64> {
    let rect = bbox_from_mask(mask, padding)?;
    let crop = rect.crop(edited)?;
    Ok(rsm_from_embeddings(
        &embedder.embed_image(&crop)?,
        &embedder.embed_style(style)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{apply_style, composite_pseudo_gt, generate_samples, DatasetConfig, StyleSet};

    #[test]
    fn rsm_range_and_limits() {
        assert_eq!(rsm_from_embeddings(&[1.0, 0.0], &[3.0, 0.0]), 1.0);
        assert_eq!(rsm_from_embeddings(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        assert_eq!(rsm_from_embeddings(&[1.0, 0.0], &[0.0, 1.0]), 0.5);
    }

    fn calibration_set(seed: u64) -> DatasetConfig {
        DatasetConfig {
            seed,
            scenes: 30,
            heldout_scenes: 0,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn own_style_rendering_scores_highest_for_its_prototype() {
        let emb = StatsEmbedder::calibrate(0).unwrap();
        let config = calibration_set(991);
        let styles = StyleSet::builtin(config.styles).unwrap();
        let (mut ok, mut total) = (0, 0);
        for (_, s) in generate_samples(&config).unwrap() {
            let styled: Vec<Image> = styles
                .iter()
                .map(|st| {
                    let full = apply_style(&s.context, st).unwrap();
                    composite_pseudo_gt(&s.context, &full, &s.mask, config.feather_px).unwrap()
                })
                .collect();
            for st in styles.iter() {
                let score = |img: &Image| rsm_score(img, &s.mask, st, &emb, Padding::default()).unwrap();
                let own = score(&styled[st.style_id]);
                total += 1;
                ok += usize::from(
                    styles
                        .iter()
                        .filter(|o| o.style_id != st.style_id)
                        .all(|o| score(&styled[o.style_id]) < own),
                );
            }
        }
        let rate = ok as f64 / total as f64;
        assert!(rate >= 0.95, "matched-style rate {rate}");
    }

    #[test]
    fn pseudo_gt_crops_rank_their_own_prototype_first() {
        let emb = StatsEmbedder::calibrate(0).unwrap();
        let (mut hits, mut total) = (0, 0);
        for seed in [991, 5, 77, 1234] {
            let config = calibration_set(seed);
            let styles = StyleSet::builtin(config.styles).unwrap();
            for (_, s) in generate_samples(&config).unwrap() {
                let scores: Vec<f64> = styles
                    .iter()
                    .map(|st| rsm_score(&s.target, &s.mask, st, &emb, Padding::default()).unwrap())
                    .collect();
                let best = (0..scores.len())
                    .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                    .unwrap();
                hits += usize::from(best == s.style_id);
                total += 1;
            }
        }
        let rate = hits as f64 / total as f64;
        assert!(rate >= 0.95, "prototype ranking rate {rate}");
    }
}
