use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use deseg_core::data::{generate_dataset, load_dataset, write_dataset, SplitRatios};
use deseg_core::train::checkpoint::Checkpoint;
use deseg_core::train::{collect_runs, evaluate_checkpoint, gradcheck_with, merge_reports, write_report, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "deseg", version, about = "Deformable U-Nets for fisheye road-scene segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic fisheye scenes into <out>/{rgb,mask}.
    GenData {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from <out>/last.ckpt if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split of a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Seed of the train/val/test partition.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Ratios `train,val,test`.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        /// Write the JSON/Markdown/CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
    },
    /// Finite-difference gradient checks; exits non-zero on any failure.
    Gradcheck {
        /// Only cases whose name contains this.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale analytic gradients by this factor (checker self-test).
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Merge test reports of several run directories into one table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Writes <out>.md and <out>.csv instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn ratios(text: &str) -> anyhow::Result<SplitRatios> {
    let v: Vec<f64> = text.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
    let [train, val, test] = v[..] else { bail!("expected three ratios, got {text:?}") };
    let r = SplitRatios { train, val, test };
    r.validate()?;
    Ok(r)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData { n, size, seed, out } => {
            let samples = generate_dataset(n, size, seed)?;
            write_dataset(&out, &samples)?;
            println!("wrote {n} samples ({size}x{size}) to {}", out.display());
        }
        Command::Train { config, out, resume } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let out_dir = cfg.out_dir.clone();
            let data = deseg_core::train::load_data(&cfg)?;
            let last = out_dir.join("last.ckpt");
            let mut trainer = if resume && last.exists() {
                Trainer::resume(cfg, data, &Checkpoint::load(&last)?)?
            } else {
                Trainer::new(cfg, data)?
            };
            println!(
                "{}: {} parameters, {} train / {} val / {} test",
                trainer.cfg.label(),
                trainer.model.count_parameters(),
                trainer.data.train.len(),
                trainer.data.val.len(),
                trainer.data.test.len()
            );
            let outcome = trainer.run(&out_dir, |r| {
                let f = |v: Option<f32>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "epoch {:>3} lr {:.1e} train_loss {:.4} val_loss {} val_miou {} train_miou {}",
                    r.epoch,
                    r.lr,
                    r.train_loss,
                    f(r.val_loss),
                    f(r.val_miou),
                    f(r.train_miou)
                );
            })?;
            println!("best epoch {}", outcome.best_epoch);
            if let Some(t) = outcome.test {
                print!("{}", t.markdown());
            }
        }
        Command::Eval { checkpoint, data, split, size, data_seed, ratios: r, out, label } => {
            let splits = load_dataset(&data, &ratios(&r)?, data_seed, size)?;
            let label = label.unwrap_or_else(|| {
                checkpoint.parent().and_then(|p| p.file_name()).map_or("model".into(), |n| n.to_string_lossy().into())
            });
            let report = evaluate_checkpoint(&checkpoint, splits.get(&split)?, &label, &split)?;
            if let Some(dir) = out {
                write_report(&dir, &report)?;
            }
            print!("{}", report.markdown());
        }
        Command::Gradcheck { only, seed, corrupt } => {
            let report = gradcheck_with(only.as_deref(), seed, corrupt)?;
            print!("{}", report.render());
            return Ok(report.passed());
        }
        Command::Report { runs, split, out } => {
            let reports = collect_runs(&runs, &split)?;
            let (md, csv) = merge_reports(&reports);
            match out {
                Some(stem) => {
                    if let Some(p) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
                        fs::create_dir_all(p)?;
                    }
                    fs::write(stem.with_extension("md"), &md)?;
                    fs::write(stem.with_extension("csv"), &csv)?;
                }
                None => print!("{md}"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
