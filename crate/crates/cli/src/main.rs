use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use flowgs_bench::{
    evaluate, nfe_sweep, parse_metrics, parse_nfe_list, run_oracle, sweep_table, write_grids, EvalImage, EvalOptions,
    OracleSuite,
};
use flowgs_core::imaging::{sr_side, Image};
use flowgs_core::pipeline::{train_stage1, train_stage2, Dataset, TrainConfig, TrainedModel};

#[derive(Parser, Debug)]
#[command(name = "flowgs", version, about = "Arbitrary-scale super-resolution with flow-sampled detail latents and Gaussian splatting")]
struct Cli {
    /// TOML configuration merged onto its `profile` (desk by default).
    #[arg(long, global = true, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in profile: desk or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Overrides the run directory holding checkpoints and logs.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trains one stage; stage 2 needs the stage-1 checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Log every N steps to stderr (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Super-resolves one PNG.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: f64,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Model checkpoint; defaults to the run directory's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scores the held-out split and writes a report and comparison grids.
    Eval {
        #[arg(long, default_value = "psnr,ssim,rpfd")]
        metrics: String,
        #[arg(long, default_value_t = 4.0)]
        scale: f64,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "report.txt")]
        report: PathBuf,
        /// Directory for LR / bicubic / output / HR grids.
        #[arg(long)]
        grids: Option<PathBuf>,
        /// Evaluate the PNGs of a manifest instead of the configured test split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Runs a numerical self-check.
    Oracle {
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// PSNR and time per image across step counts.
    Bench {
        #[arg(long, default_value = "1,2,4,8,128")]
        nfe_sweep: String,
        #[arg(long, default_value_t = 4.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plot data file (`nfe psnr sec_per_image` rows).
        #[arg(long, default_value = "nfe_sweep.txt")]
        output: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Lists the strongest Gaussian contributions at one output pixel.
    SplatDebug {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: f64,
        /// Output-grid column.
        #[arg(long)]
        x: usize,
        /// Output-grid row.
        #[arg(long)]
        y: usize,
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prints the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Render,
    Grad,
    Ode,
}

impl From<Suite> for OracleSuite {
    fn from(s: Suite) -> Self {
        match s {
            Suite::Render => OracleSuite::Render,
            Suite::Grad => OracleSuite::Grad,
            Suite::Ode => OracleSuite::Ode,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, &cli.profile) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(name)) => TrainConfig::profile(name)?,
        (None, None) => TrainConfig::desk(),
    };
    if let Some(dir) = &cli.run_dir {
        cfg.run_dir = dir.clone();
    }
    Ok(cfg)
}

fn load_model(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<TrainedModel> {
    let path = checkpoint.map_or_else(|| cfg.stage2_checkpoint(), Path::to_path_buf);
    TrainedModel::load(&cfg.model, &path).with_context(|| format!("loading model from {}", path.display()))
}

fn eval_images(cfg: &TrainConfig, manifest: Option<&Path>) -> Result<Vec<EvalImage>> {
    let data = &cfg.data;
    let images = match manifest.or(data.test_manifest.as_deref()) {
        Some(path) => EvalImage::from_manifest(path)?,
        None => EvalImage::synthetic("test", data.seed + 2, data.test_images, data.hr_size)?,
    };
    Ok(images)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Train { stage, log_every } => {
            let data = Dataset::load(&cfg.data)?;
            let every = |step: usize| log_every > 0 && (step + 1) % log_every == 0;
            let summary = if stage == 1 {
                train_stage1(&cfg, &data, |r| {
                    if every(r.step) {
                        eprintln!("{r}");
                    }
                })?
            } else {
                train_stage2(&cfg, &data, |r| {
                    if every(r.step) {
                        eprintln!("{r}");
                    }
                })?
            };
            println!(
                "stage {stage}: {} steps, best epoch {}, val {}, checkpoint {}",
                summary.steps,
                summary.best_epoch.map_or("-".into(), |e| e.to_string()),
                summary.best_val.map_or("-".into(), |v| format!("{v:.6e}")),
                summary.checkpoint.display()
            );
        }
        Command::Infer {
            input,
            scale,
            nfe,
            seed,
            output,
            checkpoint,
        } => {
            let model = load_model(&cfg, checkpoint.as_deref())?;
            let lr = Image::load_png(&input)?;
            let out = model.infer(&lr, scale, nfe, seed)?;
            if let Some(w) = &out.warning {
                eprintln!("warning: {w}");
            }
            out.image.save_png(&output)?;
            let (h, w) = out.image.dims();
            println!(
                "{} -> {} ({h}x{w}, nfe {}, {:.3}s)",
                input.display(),
                output.display(),
                out.nfe,
                out.seconds
            );
        }
        Command::Eval {
            metrics,
            scale,
            nfe,
            seed,
            report,
            grids,
            manifest,
            checkpoint,
        } => {
            let metrics = parse_metrics(&metrics)?;
            let model = load_model(&cfg, checkpoint.as_deref())?;
            let images = eval_images(&cfg, manifest.as_deref())?;
            let run = evaluate(&model, &images, &EvalOptions { scale, nfe, seed, metrics })?;
            run.report.write(&report)?;
            if let Some(dir) = grids {
                let written = write_grids(&run.samples, &dir)?;
                println!("{} grids in {}", written.len(), dir.display());
            }
            let fmt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.3}"));
            println!(
                "scale {scale} nfe {nfe}: psnr {} (bicubic {}), ssim {} (bicubic {}), report {}",
                fmt(run.report.mean_psnr()),
                fmt(run.baseline.mean_psnr()),
                fmt(run.report.mean_ssim()),
                fmt(run.baseline.mean_ssim()),
                report.display()
            );
        }
        Command::Oracle { suite } => {
            let outcome = run_oracle(suite.into())?;
            println!("{outcome}");
            if !outcome.pass {
                bail!("oracle suite {} failed", outcome.suite);
            }
        }
        Command::Bench {
            nfe_sweep: list,
            scale,
            seed,
            output,
            manifest,
            checkpoint,
        } => {
            let nfes = parse_nfe_list(&list)?;
            let model = load_model(&cfg, checkpoint.as_deref())?;
            let images = eval_images(&cfg, manifest.as_deref())?;
            let points = nfe_sweep(&model, &images, scale, &nfes, seed)?;
            let table = sweep_table(&points);
            fs::write(&output, &table).with_context(|| format!("writing {}", output.display()))?;
            print!("{table}");
        }
        Command::SplatDebug {
            input,
            scale,
            x,
            y,
            top,
            nfe,
            seed,
            checkpoint,
        } => {
            let model = load_model(&cfg, checkpoint.as_deref())?;
            let lr = Image::load_png(&input)?;
            let (h, w) = lr.dims();
            let (oh, ow) = (sr_side(h, scale), sr_side(w, scale));
            if x >= ow || y >= oh {
                bail!("query ({x},{y}) outside the {ow}x{oh} output grid");
            }
            let field = model.feature_field(&lr, scale, nfe, seed)?;
            let list = model.nets.renderer.top_contributors(&model.generator, &field, 0, (x, y), top)?;
            println!("query ({x},{y}) on {ow}x{oh} grid, top {} of window {}", list.len(), model.nets.cfg.window);
            for (rank, c) in list.iter().enumerate() {
                println!("{:>2} {c}", rank + 1);
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cause = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
            eprintln!("error: {}", cause.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
