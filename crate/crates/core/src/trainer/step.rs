use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{total_loss, LossBreakdown};
use super::optim::{adam_step, AdamParams, AdamState};
use crate::data_synth::{downsample_mask, Sample, StyleSet};
use crate::error::{Error, Result};
use crate::lora::SiteId;
use crate::model::{
    image_to_latent, tokenize_prompt, Conditioning, DiffusionTransformer, Gradients,
};
use crate::seed::derive_seed;
use crate::supervision::{aggregate_style_attention, attention_gradient, SupervisionTarget};

/// A sample converted to model inputs and a supervision target.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub index: usize,
    pub style_id: usize,
    pub cond: Conditioning,
    pub x0: Array3<f64>,
    pub target: SupervisionTarget,
}

impl PreparedSample {
    pub fn new(
        index: usize,
        sample: &Sample,
        model: &DiffusionTransformer,
        styles: &StyleSet,
        tau: f64,
        alpha: f64,
    ) -> Result<Self> {
        let prompt = tokenize_prompt(&sample.prompt, styles)?;
        if prompt.style_id != sample.style_id {
            return Err(Error::Prompt(format!(
                "prompt {:?} names style {} but the sample has style {}",
                sample.prompt, prompt.style_id, sample.style_id
            )));
        }
        let cond = model.conditioning(&sample.context, &prompt)?;
        let soft = downsample_mask(&sample.mask, cond.grid.0, cond.grid.1)?;
        Ok(Self {
            index,
            style_id: sample.style_id,
            x0: image_to_latent(&sample.target),
            target: SupervisionTarget::new(soft, tau, alpha)?,
            cond,
        })
    }
}

pub fn prepare_samples(
    samples: &[Sample],
    model: &DiffusionTransformer,
    config: &TrainConfig,
) -> Result<Vec<PreparedSample>> {
    let styles = StyleSet::builtin(model.config.styles)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| PreparedSample::new(i, s, model, &styles, config.tau, config.alpha))
        .collect()
}

/// One training example: a prepared sample with its timestep and noise draw.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub sample: &'a PreparedSample,
    pub t: usize,
    pub eps: &'a Array3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Micro-step index (0-based).
    pub step: u64,
    /// Optimizer updates applied so far, including this step's.
    pub update: u64,
    pub style_id: usize,
    pub diffusion: f64,
    pub focus: f64,
    pub cover: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub updated: bool,
    pub wall_time_s: f64,
}

/// Builds the starting model: backbone plus zero-initialized experts.
pub fn init_model(config: &TrainConfig) -> Result<DiffusionTransformer> {
    config.validate()?;
    let mut model = DiffusionTransformer::new(config.model.clone())?;
    model.attach_experts(
        config.model.styles,
        config.rank,
        config.gamma,
        config.sites.clone(),
        derive_seed(config.seed, "experts", 0),
    )?;
    model.train_backbone_attention = config.train_backbone_attention;
    Ok(model)
}

/// Model plus optimizer state; updates only the active expert (and the
/// backbone attention projections when unfrozen).
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DiffusionTransformer,
    pub config: TrainConfig,
    layers: Vec<usize>,
    lora_state: BTreeMap<(usize, SiteId, bool), AdamState>,
    base_state: BTreeMap<(SiteId, bool), AdamState>,
    pending: Option<(usize, Gradients, usize)>,
    micro_steps: u64,
    updates: u64,
}

impl Trainer {
    pub fn new(model: DiffusionTransformer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.adapters.is_none() {
            return Err(Error::Config("trainer needs a model with experts attached".into()));
        }
        Ok(Self {
            layers: config.layers(),
            model,
            config,
            lora_state: BTreeMap::new(),
            base_state: BTreeMap::new(),
            pending: None,
            micro_steps: 0,
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Loss breakdown and parameter gradients of one item.
    pub fn item_gradients(&self, item: &TrainItem) -> Result<(LossBreakdown, Gradients)> {
        let s = item.sample;
        let x_t = self.model.schedule.add_noise(&s.x0, item.eps, item.t)?;
        let (eps_hat, tape) = self.model.forward_tape(&s.cond, &x_t, item.t, s.style_id)?;
        let map = aggregate_style_attention(&tape.records, &self.layers, &s.cond.style_positions, s.cond.grid)?;
        let (lf, lc) = (self.config.lambda_focus, self.config.lambda_cover);
        let lb = total_loss(&eps_hat, item.eps, &map.values, &s.target, lf, lc)?;
        let ag = (lf > 0.0 || lc > 0.0)
            .then(|| attention_gradient(&map, &s.cond.style_positions, lb.d_map.clone()));
        let grads = self.model.backward(&tape, &lb.d_eps, ag.as_ref())?;
        Ok((lb, grads))
    }

    /// Processes one same-style micro-batch and applies Adam once `grad_accum`
    /// micro-batches have been accumulated.
    pub fn train_step(&mut self, items: &[TrainItem]) -> Result<StepReport> {
        let start = Instant::now();
        let style = items
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?
            .sample
            .style_id;
        if items.iter().any(|i| i.sample.style_id != style) {
            return Err(Error::InvalidInput("batch mixes styles; one expert per step".into()));
        }
        if let Some((pending, _, _)) = &self.pending {
            if *pending != style {
                return Err(Error::InvalidInput(format!(
                    "accumulating style {pending}, got style {style}"
                )));
            }
        }
        let results: Vec<Result<(LossBreakdown, Gradients)>> =
            items.par_iter().map(|it| self.item_gradients(it)).collect();
        let n = items.len() as f64;
        let mut step_grads = Gradients::default();
        let (mut d, mut f, mut c, mut tot) = (0.0, 0.0, 0.0, 0.0);
        for r in results {
            let (lb, g) = r?;
            step_grads.add_scaled(&g, 1.0 / n);
            d += lb.diffusion / n;
            f += lb.focus / n;
            c += lb.cover / n;
            tot += lb.total / n;
        }
        if !step_grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let grad_norm = step_grads.norm_sq().sqrt();
        let accum = self.config.grad_accum;
        let (_, acc, count) = self
            .pending
            .get_or_insert_with(|| (style, Gradients::default(), 0));
        acc.add_scaled(&step_grads, 1.0 / accum as f64);
        *count += 1;
        let updated = *count == accum;
        if updated {
            let (_, grads, _) = self.pending.take().expect("pending accumulation");
            self.apply(style, &grads)?;
            self.updates += 1;
        }
        let report = StepReport {
            step: self.micro_steps,
            update: self.updates,
            style_id: style,
            diffusion: d,
            focus: f,
            cover: c,
            total: tot,
            grad_norm,
            updated,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.micro_steps += 1;
        Ok(report)
    }

    fn apply(&mut self, style: usize, grads: &Gradients) -> Result<()> {
        let hp = AdamParams {
            lr: self.config.lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        };
        let expert = self
            .model
            .adapters
            .as_mut()
            .expect("adapters attached")
            .expert_mut(style)?;
        for (site, g) in &grads.lora {
            let pair = expert
                .pairs
                .get_mut(site)
                .ok_or_else(|| Error::InvalidInput(format!("no adapter at {site}")))?;
            for (is_a, p, gr) in [(true, &mut pair.a, &g.a), (false, &mut pair.b, &g.b)] {
                let state = self
                    .lora_state
                    .entry((style, *site, is_a))
                    .or_insert_with(|| AdamState::new(p.len()));
                adam_step(
                    p.as_slice_mut().expect("contiguous"),
                    gr.as_slice().expect("contiguous"),
                    state,
                    hp,
                )?;
            }
        }
        for (site, g) in &grads.base {
            let lin = self
                .model
                .site_linear_mut(site)
                .ok_or_else(|| Error::InvalidInput(format!("no backbone site {site}")))?;
            let w = lin.weight.as_slice_mut().expect("contiguous");
            let st = self
                .base_state
                .entry((*site, true))
                .or_insert_with(|| AdamState::new(w.len()));
            adam_step(w, g.weight.as_slice().expect("contiguous"), st, hp)?;
            let b = lin.bias.as_slice_mut().expect("contiguous");
            let st = self
                .base_state
                .entry((*site, false))
                .or_insert_with(|| AdamState::new(b.len()));
            adam_step(b, g.bias.as_slice().expect("contiguous"), st, hp)?;
        }
        Ok(())
    }
}
