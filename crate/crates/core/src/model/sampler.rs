//! Deterministic DDIM (η = 0) reverse process for producing edits.

use ndarray::Array3;
use rand_distr::{Distribution, StandardNormal};

use super::dit::{signed_to_image, DiffusionTransformer, ForwardOutput};
use super::tokenizer::TokenizedPrompt;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::rng_for;

/// `steps` distinct timesteps from `T` down towards 1.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::InvalidInput(format!(
            "sampling steps must be in [1, {timesteps}], got {steps}"
        )));
    }
    Ok((0..steps).map(|i| timesteps - i * timesteps / steps).collect())
}

/// Standard-normal tensor drawn from the stream `(seed, "sample/noise")`.
pub fn seeded_noise(shape: (usize, usize, usize), seed: u64, stream: &str) -> Array3<f64> {
    let mut rng = rng_for(seed, stream, 0);
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// Runs the reverse process; `on_step(step, t, output)` sees every step's
/// forward output (1-based step index) with attention scores when `capture` is set.
#[allow(clippy::too_many_arguments)]
pub fn sample_edit_with(
    model: &DiffusionTransformer,
    context: &Image,
    prompt: &TokenizedPrompt,
    style_id: usize,
    steps: usize,
    seed: u64,
    capture: bool,
    mut on_step: impl FnMut(usize, usize, &ForwardOutput) -> Result<()>,
) -> Result<Image> {
    if prompt.style_id != style_id {
        return Err(Error::Prompt(format!(
            "prompt names style {} but style {style_id} was requested",
            prompt.style_id
        )));
    }
    let cond = model.conditioning(context, prompt)?;
    let schedule = &model.schedule;
    let ts = ddim_timesteps(schedule.timesteps(), steps)?;
    let mut x = seeded_noise(context.shape(), seed, "sample/noise");
    let mut x0 = x.clone();
    for (i, &t) in ts.iter().enumerate() {
        let out = model.forward(&cond, &x, t, style_id, capture)?;
        on_step(i + 1, t, &out)?;
        let ab = schedule.alpha_bar(t)?;
        let eps = &out.eps_hat;
        x0 = (&x - &(eps * (1.0 - ab).sqrt())) / ab.sqrt();
        x0.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        let ab_prev = match ts.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        x = &x0 * ab_prev.sqrt() + eps * (1.0 - ab_prev).sqrt();
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled image".into()));
    }
    Ok(signed_to_image(&x0))
}

pub fn sample_edit(
    model: &DiffusionTransformer,
    context: &Image,
    prompt: &TokenizedPrompt,
    style_id: usize,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    sample_edit_with(model, context, prompt, style_id, steps, seed, false, |_, _, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::StyleSet;
    use crate::model::{tokenize_prompt, ModelConfig};

    fn setup() -> (DiffusionTransformer, Image, TokenizedPrompt) {
        let config = ModelConfig {
            dim: 16,
            heads: 2,
            double_blocks: 1,
            single_blocks: 1,
            timesteps: 20,
            ..ModelConfig::default()
        };
        let model = DiffusionTransformer::new(config).unwrap();
        let ctx = Image::from_fn(16, 16, 3, |y, x, c| ((y + 2 * x + c) % 7) as f64 / 6.0);
        let styles = StyleSet::builtin(4).unwrap();
        let prompt = tokenize_prompt("make the cat pixel-art style", &styles).unwrap();
        (model, ctx, prompt)
    }

    #[test]
    fn timestep_grid() {
        assert_eq!(ddim_timesteps(100, 1).unwrap(), vec![100]);
        assert_eq!(ddim_timesteps(4, 4).unwrap(), vec![4, 3, 2, 1]);
        let ts = ddim_timesteps(100, 20).unwrap();
        assert_eq!(ts.len(), 20);
        assert!(ts.windows(2).all(|w| w[0] > w[1]) && *ts.last().unwrap() >= 1);
        assert!(ddim_timesteps(10, 0).is_err() && ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn deterministic_valid_and_not_identity() {
        let (model, ctx, prompt) = setup();
        let a = sample_edit(&model, &ctx, &prompt, 0, 5, 3).unwrap();
        let b = sample_edit(&model, &ctx, &prompt, 0, 5, 3).unwrap();
        assert_eq!(a, b);
        for steps in [1, 20] {
            let out = sample_edit(&model, &ctx, &prompt, 0, steps, 3).unwrap();
            assert_eq!(out.shape(), ctx.shape());
            assert!(out.is_unit_range());
            let diff: f64 = out.data().iter().zip(ctx.data()).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff / out.data().len() as f64 > 0.0);
        }
    }

    #[test]
    fn step_callback_and_style_mismatch() {
        let (model, ctx, prompt) = setup();
        let mut seen = Vec::new();
        sample_edit_with(&model, &ctx, &prompt, 0, 4, 1, true, |s, t, out| {
            assert_eq!(out.records.len(), 2);
            seen.push((s, t));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(1, 20), (2, 15), (3, 10), (4, 5)]);
        assert!(sample_edit(&model, &ctx, &prompt, 1, 4, 1).is_err());
    }
}
