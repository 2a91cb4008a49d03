use rand::seq::index::sample;
use rand::Rng;

use super::config::TrainConfig;
use super::step::{init_model, prepare_samples, TrainItem, Trainer};
use crate::data_synth::{generate_samples, DatasetConfig};
use crate::error::{Error, Result};
use crate::image::SoftMask;
use crate::model::{seeded_noise, ModelConfig};
use crate::seed::rng_for;
use crate::supervision::{cover_loss, focus_loss, SupervisionTarget};

pub const MIN_COORDS: usize = 64;
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Central differences and analytic values on a subset of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FdComparison {
    pub coords: Vec<usize>,
    pub numeric: Vec<f64>,
    pub analytic: Vec<f64>,
}

impl FdComparison {
    /// `max_i |n_i − a_i| / max(|n_i|, |a_i|, floor)`.
    pub fn max_rel(&self, floor: f64) -> f64 {
        self.numeric
            .iter()
            .zip(&self.analytic)
            .map(|(n, a)| (n - a).abs() / n.abs().max(a.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    /// `‖n − a‖∞ / max(‖n‖∞, ‖a‖∞)`; insensitive to coordinates whose true
    /// gradient sits below the difference quotient's rounding noise.
    pub fn normwise(&self) -> f64 {
        let inf = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0, |m: f64, x| m.max(x.abs()));
        let diff = inf(&mut self.numeric.iter().zip(&self.analytic).map(|(n, a)| n - a));
        let scale = inf(&mut self.numeric.iter().copied()).max(inf(&mut self.analytic.iter().copied()));
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Central differences at step `h` over a seeded subset of at least
/// [`MIN_COORDS`] coordinates (all if fewer exist).
pub fn finite_diff_compare(
    loss_fn: impl Fn(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<FdComparison> {
    if params.len() != analytic.len() {
        return Err(Error::Shape("gradient length differs from parameters".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput("step must be positive".into()));
    }
    let n = params.len();
    let want = coords.max(MIN_COORDS).min(n);
    let mut idx: Vec<usize> = if want == n {
        (0..n).collect()
    } else {
        sample(&mut rng_for(seed, "gradcheck", 0), n, want).into_vec()
    };
    idx.sort_unstable();
    let mut theta = params.to_vec();
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = theta[i];
        theta[i] = orig + h;
        let fp = loss_fn(&theta)?;
        theta[i] = orig - h;
        let fm = loss_fn(&theta)?;
        theta[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        numeric.push((fp - fm) / (2.0 * h));
    }
    Ok(FdComparison {
        analytic: idx.iter().map(|&i| analytic[i]).collect(),
        coords: idx,
        numeric,
    })
}

/// Worst elementwise relative error (denominator floored at [`DEFAULT_FLOOR`]).
pub fn finite_diff_gradcheck(
    loss_fn: impl Fn(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    Ok(finite_diff_compare(loss_fn, params, analytic, h, coords, seed)?.max_rel(DEFAULT_FLOOR))
}

/// Worst-case errors over a set of checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSummary {
    /// Elementwise relative error, floor [`DEFAULT_FLOOR`].
    pub elementwise: f64,
    pub normwise: f64,
}

impl ErrorSummary {
    fn absorb(&mut self, c: &FdComparison) {
        self.elementwise = self.elementwise.max(c.max_rel(DEFAULT_FLOOR));
        self.normwise = self.normwise.max(c.normwise());
    }
}

/// A random 8×8 attention map and a soft mask with at least one full cell.
pub fn random_map_instance(seed: u64, trial: u64) -> (Vec<f64>, SoftMask) {
    let mut rng = rng_for(seed, "gradcheck/map", trial);
    let mut mask: Vec<f64> = (0..64)
        .map(|_| if rng.random::<f64>() < 0.3 { rng.random() } else { 0.0 })
        .collect();
    mask[rng.random_range(0..64)] = 1.0;
    let m_hat = (0..64).map(|_| rng.random::<f64>()).collect();
    (m_hat, SoftMask::new(8, 8, mask).expect("valid mask"))
}

/// Worst focus and cover gradient errors over `trials` random maps, with
/// central differences at step `h` over every cell.
pub fn map_loss_gradcheck(
    trials: usize,
    tau: f64,
    alpha: f64,
    h: f64,
    seed: u64,
) -> Result<(ErrorSummary, ErrorSummary)> {
    let (mut wf, mut wc) = (ErrorSummary::default(), ErrorSummary::default());
    for trial in 0..trials as u64 {
        let (m_hat, mask) = random_map_instance(seed, trial);
        let t = SupervisionTarget::new(mask, tau, alpha)?;
        let f = focus_loss(&m_hat, &t)?;
        wf.absorb(&finite_diff_compare(|x| Ok(focus_loss(x, &t)?.value), &m_hat, &f.grad, h, 64, trial)?);
        let c = cover_loss(&m_hat, &t)?;
        wc.absorb(&finite_diff_compare(|x| Ok(cover_loss(x, &t)?.value), &m_hat, &c.grad, h, 64, trial)?);
    }
    Ok((wf, wc))
}

/// Worst relative error of the full objective's gradient with respect to the
/// active expert's LoRA factors, on a small model with random `B` factors.
pub fn objective_gradcheck(
    trial: u64,
    tau: f64,
    alpha: f64,
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<ErrorSummary> {
    let config = TrainConfig {
        tau,
        alpha,
        rank: 2,
        seed: crate::seed::derive_seed(seed, "gradcheck/objective", trial),
        model: ModelConfig {
            dim: 8,
            heads: 2,
            double_blocks: 1,
            single_blocks: 1,
            timesteps: 10,
            seed: trial,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let data = DatasetConfig {
        seed: config.seed,
        scenes: 1,
        heldout_scenes: 0,
        canvas: 32,
        ..DatasetConfig::default()
    };
    let samples: Vec<_> = generate_samples(&data)?.into_iter().map(|(_, s)| s).take(1).collect();
    let mut model = init_model(&config)?;
    let mut rng = rng_for(config.seed, "gradcheck/b", 0);
    for e in &mut model.adapters.as_mut().expect("attached").experts {
        for pair in e.pairs.values_mut() {
            pair.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    let prepared = prepare_samples(&samples, &model, &config)?;
    let sample = &prepared[0];
    let style = sample.style_id;
    let eps = seeded_noise(sample.x0.dim(), config.seed, "gradcheck/noise");
    let t = 1 + (trial as usize * 3) % config.model.timesteps;
    let trainer = Trainer::new(model, config)?;
    let item = TrainItem { sample, t, eps: &eps };
    let (_, grads) = trainer.item_gradients(&item)?;

    let expert = trainer.model.adapters.as_ref().expect("attached").expert(style)?;
    let mut params = Vec::new();
    let mut analytic = Vec::new();
    for (site, pair) in &expert.pairs {
        let g = grads
            .lora
            .get(site)
            .ok_or_else(|| Error::InvalidInput(format!("no gradient for {site}")))?;
        params.extend(pair.a.iter().chain(pair.b.iter()));
        analytic.extend(g.a.iter().chain(g.b.iter()));
    }
    let loss = |theta: &[f64]| -> Result<f64> {
        let mut tr = trainer.clone();
        let e = tr.model.adapters.as_mut().expect("attached").expert_mut(style)?;
        let mut it = theta.iter();
        for pair in e.pairs.values_mut() {
            for v in pair.a.iter_mut().chain(pair.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(tr.item_gradients(&item)?.0.total)
    };
    let mut out = ErrorSummary::default();
    out.absorb(&finite_diff_compare(loss, &params, &analytic, h, coords, trial)?);
    Ok(out)
}
