use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::SiteSelection;
use crate::model::ModelConfig;
use crate::supervision::{DEFAULT_ALPHA, DEFAULT_TAU};

/// Training hyper-parameters; serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_focus: f64,
    pub lambda_cover: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub grad_accum: usize,
    /// Optimizer updates.
    pub total_steps: usize,
    pub seed: u64,
    pub tau: f64,
    pub alpha: f64,
    pub rank: usize,
    pub gamma: f64,
    /// Global layer ids whose attention is supervised; empty means every double-stream block.
    pub supervision_layers: Vec<usize>,
    pub sites: SiteSelection,
    pub train_backbone_attention: bool,
    /// Write an intermediate checkpoint every this many updates (0 disables).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_focus: 0.1,
            lambda_cover: 0.2,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 1,
            grad_accum: 1,
            total_steps: 2000,
            seed: 0,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            rank: 4,
            gamma: 1.0,
            supervision_layers: Vec::new(),
            sites: SiteSelection::default(),
            train_backbone_attention: false,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Optimizer settings of the full-size recipe (lr 1e-4, batch 2, accumulation 4, 5000 updates).
    pub fn full_scale() -> Self {
        Self {
            lr: 1e-4,
            batch: 2,
            grad_accum: 4,
            total_steps: 5000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_focus >= 0.0 && self.lambda_focus.is_finite())
            || !(self.lambda_cover >= 0.0 && self.lambda_cover.is_finite())
        {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if self.batch == 0 || self.grad_accum == 0 {
            return bad("batch and grad_accum must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("tau and alpha must be finite and positive".into());
        }
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        let layers = self.model.num_layers();
        if let Some(l) = self.supervision_layers.iter().find(|&&l| l >= layers) {
            return bad(format!("supervision layer {l} outside the {layers}-layer model"));
        }
        Ok(())
    }

    /// The supervised layer set with the empty-means-double-blocks default resolved.
    pub fn layers(&self) -> Vec<usize> {
        if self.supervision_layers.is_empty() {
            self.model.double_layers()
        } else {
            let mut l = self.supervision_layers.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = TrainConfig::from_toml("lambda_cover = 0.0\n[model]\ndim = 32\n").unwrap();
        assert_eq!(p.lambda_cover, 0.0);
        assert_eq!(p.model.dim, 32);
        assert_eq!(p.lambda_focus, 0.1);
        assert!(TrainConfig::from_toml("unknown = 1").is_err());
        assert!(TrainConfig::from_toml("batch = 0").is_err());
        assert!(TrainConfig::from_toml("supervision_layers = [9]").is_err());
    }

    #[test]
    fn defaults_carry_reference_weights() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda_focus, c.lambda_cover, c.rank), (0.1, 0.2, 4));
        assert_eq!(c.layers(), vec![0, 1]);
        let p = TrainConfig::full_scale();
        assert_eq!((p.lr, p.batch, p.grad_accum, p.total_steps), (1e-4, 2, 4, 5000));
    }
}
