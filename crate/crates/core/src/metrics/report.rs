use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bbox::Padding;
use super::embedder::{Embedder, StatsEmbedder};
use super::perceptual::{masked_mse, masked_perceptual_distance, PerceptualFeatureBank};
use super::rsm_score;
use crate::data_synth::{DatasetManifest, Sample, Split, StyleSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{load_checkpoint, sample_edit, tokenize_prompt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }

    /// `mean_{std}` with four decimals.
    pub fn display(&self) -> String {
        format!("{:.4}_{{{:.4}}}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RseRow {
    pub id: String,
    pub style_id: usize,
    pub rsm: f64,
    pub lpips_bg: f64,
    pub mse_bg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RseAggregate {
    pub rsm: MeanStd,
    pub lpips_bg: MeanStd,
    pub mse_bg: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RseMetadata {
    pub embedder: String,
    pub bank_seed: u64,
    pub padding: Padding,
    pub dataset: String,
    pub editor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RseReport {
    pub metadata: RseMetadata,
    pub rows: Vec<RseRow>,
    pub aggregate: RseAggregate,
}

impl RseReport {
    pub fn from_rows(metadata: RseMetadata, rows: Vec<RseRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("report needs at least one sample".into()));
        }
        let col = |f: fn(&RseRow) -> f64| MeanStd::of(&rows.iter().map(f).collect::<Vec<_>>());
        let aggregate = RseAggregate {
            rsm: col(|r| r.rsm),
            lpips_bg: col(|r| r.lpips_bg),
            mse_bg: col(|r| r.mse_bg),
        };
        Ok(Self {
            metadata,
            rows,
            aggregate,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,style_id,rsm,lpips_bg,mse_bg\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:e},{:e},{:e}", r.id, r.style_id, r.rsm, r.lpips_bg, r.mse_bg);
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.json", self.to_json()), ("report.csv", self.to_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Evaluation inputs shared by every sample.
pub struct RseContext<'a> {
    pub embedder: &'a dyn Embedder,
    pub bank: &'a PerceptualFeatureBank,
    pub padding: Padding,
    pub styles: &'a StyleSet,
}

/// Scores `editor(sample)` against each sample's context and mask.
pub fn rse_report_with(
    samples: &[(String, Sample)],
    ctx: &RseContext,
    dataset: &str,
    editor_name: &str,
    editor: impl Fn(&Sample) -> Result<Image> + Sync,
) -> Result<RseReport> {
    let rows = samples
        .par_iter()
        .map(|(id, s)| {
            let edited = editor(s)?;
            Ok(RseRow {
                id: id.clone(),
                style_id: s.style_id,
                rsm: rsm_score(&edited, &s.mask, ctx.styles.get(s.style_id)?, ctx.embedder, ctx.padding)?,
                lpips_bg: masked_perceptual_distance(&edited, &s.context, &s.mask, ctx.bank)?,
                mse_bg: masked_mse(&edited, &s.context, &s.mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = RseMetadata {
        embedder: ctx.embedder.id(),
        bank_seed: ctx.bank.seed,
        padding: ctx.padding,
        dataset: dataset.to_string(),
        editor: editor_name.to_string(),
    };
    RseReport::from_rows(metadata, rows)
}

/// Sampler settings for checkpoint evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditSettings {
    pub steps: usize,
    pub seed: u64,
}

/// Evaluation settings; serialized as TOML.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sampler_steps: usize,
    pub sample_seed: u64,
    pub embedder_seed: u64,
    pub bank_seed: u64,
    pub padding: Padding,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler_steps: 25,
            sample_seed: 0,
            embedder_seed: 0,
            bank_seed: 0,
            padding: Padding::default(),
        }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EditSettings {
        EditSettings {
            steps: self.sampler_steps,
            seed: self.sample_seed,
        }
    }

    pub fn embedder(&self) -> Result<StatsEmbedder> {
        StatsEmbedder::calibrate(self.embedder_seed)
    }

    pub fn bank(&self, channels: usize) -> PerceptualFeatureBank {
        PerceptualFeatureBank::new(self.bank_seed, channels)
    }
}

/// Held-out samples of a manifest, keyed by record id.
pub fn heldout_samples(manifest_path: &Path) -> Result<(DatasetManifest, Vec<(String, Sample)>)> {
    let (manifest, base) = DatasetManifest::load(manifest_path)?;
    let samples = manifest
        .records(Split::Heldout)
        .map(|r| Ok((r.id.clone(), manifest.load_sample(&base, r)?)))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Manifest("held-out split is empty".into()));
    }
    Ok((manifest, samples))
}

/// Runs the checkpoint's sampler on every held-out sample and scores the edits.
pub fn rse_report(
    manifest_path: &Path,
    checkpoint_path: &Path,
    embedder: &dyn Embedder,
    bank: &PerceptualFeatureBank,
    padding: Padding,
    settings: EditSettings,
) -> Result<RseReport> {
    let model = load_checkpoint(checkpoint_path)?;
    let (manifest, samples) = heldout_samples(manifest_path)?;
    let styles = StyleSet::builtin(manifest.config.styles)?;
    let ctx = RseContext {
        embedder,
        bank,
        padding,
        styles: &styles,
    };
    let dataset = format!("synthetic/seed={}", manifest.config.seed);
    let editor = format!(
        "ddim/steps={}/seed={}",
        settings.steps, settings.seed
    );
    rse_report_with(&samples, &ctx, &dataset, &editor, |s| {
        let prompt = tokenize_prompt(&s.prompt, &styles)?;
        sample_edit(&model, &s.context, &prompt, s.style_id, settings.steps, settings.seed)
    })
}
