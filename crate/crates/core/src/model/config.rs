use serde::{Deserialize, Serialize};

use super::tokenizer::VOCAB;
use crate::error::{Error, Result};

/// Architecture hyper-parameters of the toy denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub patch: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub timesteps: usize,
    pub styles: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            double_blocks: 2,
            single_blocks: 2,
            patch: 4,
            channels: 3,
            mlp_ratio: 2,
            vocab: VOCAB.len() + 1,
            timesteps: 100,
            styles: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return err("dim must be a positive multiple of heads");
        }
        if self.double_blocks == 0 || self.single_blocks == 0 {
            return err("need at least one double-stream and one single-stream block");
        }
        if self.timesteps < 2 {
            return err("timesteps must be at least 2");
        }
        if self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return err("patch, channels, and mlp_ratio must be positive");
        }
        if self.vocab < VOCAB.len() + 1 {
            return err("vocab smaller than the built-in word list");
        }
        if self.styles == 0 {
            return err("styles must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn num_layers(&self) -> usize {
        self.double_blocks + self.single_blocks
    }

    /// Global layer ids of the double-stream blocks.
    pub fn double_layers(&self) -> Vec<usize> {
        (0..self.double_blocks).collect()
    }
}
