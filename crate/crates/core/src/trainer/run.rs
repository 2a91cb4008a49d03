use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::step::{init_model, prepare_samples, PreparedSample, StepReport, TrainItem, Trainer};
use crate::data_synth::{DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, seeded_noise, DiffusionTransformer};
use crate::seed::rng_for;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Sample indices, timesteps, and noise for one optimizer update, as
/// `grad_accum` micro-batches of `batch` same-style items.
pub fn draw_update(
    samples: &[PreparedSample],
    config: &TrainConfig,
    update: u64,
) -> Result<Vec<Vec<(usize, usize, Array3<f64>)>>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let mut rng = rng_for(config.seed, "train/schedule", update);
    let first = rng.random_range(0..samples.len());
    let style = samples[first].style_id;
    let pool: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].style_id == style)
        .collect();
    let per_update = config.batch * config.grad_accum;
    let t_max = config.model.timesteps;
    let mut out = Vec::with_capacity(config.grad_accum);
    for j in 0..config.grad_accum {
        let mut micro = Vec::with_capacity(config.batch);
        for b in 0..config.batch {
            let k = j * config.batch + b;
            let idx = if k == 0 {
                first
            } else {
                pool[rng.random_range(0..pool.len())]
            };
            let t = rng.random_range(1..=t_max);
            let stream = update * per_update as u64 + k as u64;
            let eps = seeded_noise(samples[idx].x0.dim(), rng_seed(config.seed, stream), "train/noise");
            micro.push((idx, t, eps));
        }
        out.push(micro);
    }
    Ok(out)
}

fn rng_seed(seed: u64, stream: u64) -> u64 {
    crate::seed::derive_seed(seed, "train/noise-seed", stream)
}

#[derive(Serialize)]
struct ConfigLine<'a> {
    event: &'static str,
    config: &'a TrainConfig,
    samples: usize,
}

#[derive(Serialize)]
struct StepLine<'a> {
    event: &'static str,
    #[serde(flatten)]
    report: &'a StepReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DiffusionTransformer,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub reports: Vec<StepReport>,
}

/// Trains on in-memory samples, writing the JSON-lines log and checkpoints to `out_dir`.
pub fn run_training(samples: &[Sample], config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    run_training_with(samples, config, out_dir, |_| {})
}

/// Like [`run_training`], calling `on_report` after every micro-step.
pub fn run_training_with(
    samples: &[Sample],
    config: &TrainConfig,
    out_dir: &Path,
    mut on_report: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    let model = init_model(config)?;
    let prepared = prepare_samples(samples, &model, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let write_line = |log: &mut BufWriter<File>, line: String| {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };
    let header = ConfigLine {
        event: "config",
        config,
        samples: prepared.len(),
    };
    write_line(&mut log, serde_json::to_string(&header).expect("serializable"))?;

    let mut trainer = Trainer::new(model, config.clone())?;
    let mut reports = Vec::new();
    for update in 0..config.total_steps as u64 {
        for micro in draw_update(&prepared, config, update)? {
            let items: Vec<TrainItem> = micro
                .iter()
                .map(|(i, t, eps)| TrainItem {
                    sample: &prepared[*i],
                    t: *t,
                    eps,
                })
                .collect();
            let report = trainer.train_step(&items)?;
            let line = StepLine {
                event: "step",
                report: &report,
            };
            write_line(&mut log, serde_json::to_string(&line).expect("serializable"))?;
            on_report(&report);
            reports.push(report);
        }
        let done = update + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every as u64 == 0 {
            save_checkpoint(&trainer.model, &out_dir.join(format!("step_{done:06}.ckpt")))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&trainer.model, &checkpoint)?;
    Ok(TrainOutcome {
        model: trainer.model,
        checkpoint,
        log: log_path,
        reports,
    })
}

/// Loads the training split of a manifest and trains on it.
pub fn run_training_from_manifest(
    manifest_path: &Path,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let (manifest, base) = DatasetManifest::load(manifest_path)?;
    if manifest.config.styles != config.model.styles {
        return Err(Error::Config(format!(
            "dataset has {} styles, model expects {}",
            manifest.config.styles, config.model.styles
        )));
    }
    let samples = manifest.load_split(&base, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Manifest("training split is empty".into()));
    }
    run_training(&samples, config, out_dir)
}
