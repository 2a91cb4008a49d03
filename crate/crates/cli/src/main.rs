use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use stylemask::ablation::{run_ablation, AblationEval, AblationPlan};
use stylemask::data_synth::{build_dataset, DatasetConfig, StyleSet, MANIFEST_FILE};
use stylemask::metrics::{heldout_samples, rse_report, EvalConfig};
use stylemask::model::{load_checkpoint, tokenize_prompt};
use stylemask::supervision::{DEFAULT_ALPHA, DEFAULT_TAU};
use stylemask::trainer::{
    attention_evolution, map_loss_gradcheck, objective_gradcheck, run_training_with, TrainConfig,
};

/// Localized style editing toolkit: data synthesis, training, evaluation, and diagnostics.
#[derive(Parser, Debug)]
#[command(name = "stylemask", version)]
struct Cli {
    /// TOML file with optional [dataset], [train], and [eval] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the dataset, training, and sampling seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (1 gives a fully sequential run).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train per-style experts on a dataset's training split.
    Train(TrainArgs),
    /// Score a checkpoint's edits on the held-out split.
    Eval(EvalArgs),
    /// Save style-token attention maps at selected sampler steps.
    AttnDump(AttnDumpArgs),
    /// Compare analytic loss gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every ablation arm.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    heldout_scenes: Option<usize>,
    #[arg(long)]
    feather: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest (or its directory).
    #[arg(long)]
    data: PathBuf,
    /// Overrides `total_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Print a progress line every this many micro-steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides the sampler step count.
    #[arg(long)]
    sampler_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct AttnDumpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// 1-based sampler steps to dump.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25")]
    steps: Vec<usize>,
    #[arg(long)]
    sampler_steps: Option<usize>,
    /// Only the first N held-out samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// End-to-end objective checks on a small model.
    #[arg(long, default_value_t = 2)]
    objective_trials: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Overrides `total_steps` for every arm.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sampler_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    dataset: DatasetConfig,
    train: TrainConfig,
    eval: EvalConfig,
}

impl FileConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => FileConfig::default(),
        };
        if let Some(s) = seed {
            cfg.dataset.seed = s;
            cfg.train.seed = s;
            cfg.eval.sample_seed = s;
        }
        Ok(cfg)
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = FileConfig::load(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.scenes {
                cfg.dataset.scenes = n;
            }
            if let Some(n) = a.heldout_scenes {
                cfg.dataset.heldout_scenes = n;
            }
            if let Some(n) = a.feather {
                cfg.dataset.feather_px = n;
            }
            let manifest = build_dataset(&cfg.dataset, out)?;
            println!(
                "wrote {} samples to {}",
                manifest.samples.len(),
                out.join(MANIFEST_FILE).display()
            );
        }
        Command::Train(a) => {
            if let Some(n) = a.steps {
                cfg.train.total_steps = n;
            }
            let (manifest, base) = stylemask::data_synth::DatasetManifest::load(&manifest_path(&a.data))?;
            let samples = manifest.load_split(&base, stylemask::data_synth::Split::Train)?;
            if samples.is_empty() {
                bail!("training split is empty");
            }
            let every = a.log_every;
            let outcome = run_training_with(&samples, &cfg.train, out, |r| {
                if every > 0 && r.step % every == 0 {
                    println!(
                        "step {:>6} style {} eps {:.5} focus {:.5} cover {:.5} total {:.5}",
                        r.step, r.style_id, r.diffusion, r.focus, r.cover, r.total
                    );
                }
            })?;
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("log {}", outcome.log.display());
        }
        Command::Eval(a) => {
            if let Some(n) = a.sampler_steps {
                cfg.eval.sampler_steps = n;
            }
            let model = load_checkpoint(&a.checkpoint)?;
            let embedder = cfg.eval.embedder()?;
            let bank = cfg.eval.bank(model.config.channels);
            let report = rse_report(
                &manifest_path(&a.data),
                &a.checkpoint,
                &embedder,
                &bank,
                cfg.eval.padding,
                cfg.eval.settings(),
            )?;
            report.save(out)?;
            let g = &report.aggregate;
            println!(
                "RSM {}  LPIPS_bg {}  MSE_bg {}  ({} samples)",
                g.rsm.display(),
                g.lpips_bg.display(),
                g.mse_bg.display(),
                report.rows.len()
            );
        }
        Command::AttnDump(a) => {
            if let Some(n) = a.sampler_steps {
                cfg.eval.sampler_steps = n;
            }
            let model = load_checkpoint(&a.checkpoint)?;
            let (manifest, samples) = heldout_samples(&manifest_path(&a.data))?;
            let styles = StyleSet::builtin(manifest.config.styles)?;
            let layers = TrainConfig {
                model: model.config.clone(),
                ..cfg.train.clone()
            }
            .layers();
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let take = a.limit.unwrap_or(samples.len());
            let mut written = 0;
            for (id, s) in samples.iter().take(take) {
                let prompt = tokenize_prompt(&s.prompt, &styles)?;
                let (_, maps) = attention_evolution(
                    &model,
                    &s.context,
                    &prompt,
                    s.style_id,
                    &layers,
                    cfg.eval.sampler_steps,
                    &a.steps,
                    cfg.eval.sample_seed,
                )?;
                for m in maps {
                    m.map.save_png(&out.join(format!("{id}_step{:02}.png", m.step)))?;
                    written += 1;
                }
            }
            println!("wrote {written} maps to {}", out.display());
        }
        Command::Gradcheck(a) => {
            let tau = if cli.config.is_some() { cfg.train.tau } else { DEFAULT_TAU };
            let alpha = if cli.config.is_some() { cfg.train.alpha } else { DEFAULT_ALPHA };
            let seed = cfg.train.seed;
            let mut report = String::new();
            let mut worst: f64 = 0.0;
            for t in [1.0, tau] {
                let (f, c) = map_loss_gradcheck(a.trials, t, alpha, a.h, seed)?;
                let _ = writeln!(
                    report,
                    "focus (tau {t}): normwise {:.3e} elementwise {:.3e}",
                    f.normwise, f.elementwise
                );
                let _ = writeln!(
                    report,
                    "cover (tau {t}): normwise {:.3e} elementwise {:.3e}",
                    c.normwise, c.elementwise
                );
                worst = worst.max(f.normwise).max(c.normwise);
            }
            for trial in 0..a.objective_trials as u64 {
                let e = objective_gradcheck(trial, tau, alpha, a.h, 64, seed)?;
                let _ = writeln!(
                    report,
                    "total (trial {trial}): normwise {:.3e} elementwise {:.3e}",
                    e.normwise, e.elementwise
                );
                worst = worst.max(e.normwise);
            }
            print!("{report}");
            if !(worst <= a.tol) {
                bail!("max normwise relative error {worst:.3e} exceeds tolerance {:.1e}", a.tol);
            }
            println!("ok: max normwise relative error {worst:.3e} <= {:.1e}", a.tol);
        }
        Command::Ablate(a) => {
            if let Some(n) = a.steps {
                cfg.train.total_steps = n;
            }
            if let Some(n) = a.sampler_steps {
                cfg.eval.sampler_steps = n;
            }
            let embedder = cfg.eval.embedder()?;
            let bank = cfg.eval.bank(cfg.train.model.channels);
            let plan = AblationPlan::standard(cfg.train.clone());
            let eval = AblationEval {
                embedder: &embedder,
                bank: &bank,
                padding: cfg.eval.padding,
                settings: cfg.eval.settings(),
            };
            let table = run_ablation(&plan, &manifest_path(&a.data), out, &eval, |arm| {
                eprintln!("arm {} ({})", arm.name, arm.label);
            })?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
