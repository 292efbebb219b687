//! `srdrm` command-line tool.
//!
//! Exit status: 0 on success, 1 for contract, format and I/O errors, 2 when
//! training aborts on a numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use srdrm::datakit::{prepare_lr_sets, DatasetManifest, PrepareOptions, Split};
use srdrm::train::{bench_checkpoint, eval_checkpoint, infer, train, Roi, TrainConfig, TrainError, TrainMode};

#[derive(Parser)]
#[command(name = "srdrm", version, about = "Residual-multiplier super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build HR/LR pairs and a manifest from a directory of images.
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        scales: Vec<usize>,
        #[arg(long, default_value_t = 85)]
        jpeg_quality: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a generator; flags override the config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tiny: bool,
    },
    /// Score a checkpoint on one split and write the report files.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Super-resolve one image, optionally only a region of interest.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// X,Y,W,H in input pixels.
        #[arg(long)]
        roi: Option<Roi>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Time forward passes on a fixed-size input.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// WxH of the input.
        #[arg(long)]
        size: String,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), TrainError> {
    let bad = || TrainError::Config(format!("size must be WxH, got {s}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        w.trim().parse().map_err(|_| bad())?,
        h.trim().parse().map_err(|_| bad())?,
    ))
}

fn run(command: Command) -> Result<ExitCode, TrainError> {
    match command {
        Command::PrepareData {
            input,
            output,
            scales,
            jpeg_quality,
            seed,
        } => {
            let options = PrepareOptions {
                scales,
                jpeg_quality,
                seed,
                ..PrepareOptions::default()
            };
            let m = prepare_lr_sets(&input, &output, &options)?;
            println!(
                "{} train, {} val, {} test pairs; {} rejected",
                m.train.len(),
                m.val.len(),
                m.test.len(),
                m.rejected.len()
            );
            for r in &m.rejected {
                println!("rejected {}: {}", r.path, r.reason);
            }
        }
        Command::Train {
            config,
            data,
            scale,
            mode,
            epochs,
            batch_size,
            out,
            tiny,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            cfg.scale = scale.unwrap_or(cfg.scale);
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.tiny |= tiny;
            cfg.validate()?;
            let manifest = DatasetManifest::load(&data)?;
            info!("training {} mode at {}x for {} epochs", cfg.mode, cfg.scale, cfg.epochs);
            let outcome = train(&cfg, &manifest, &out)?;
            for c in &outcome.checkpoints {
                println!("{}", c.display());
            }
            if let Some(last) = outcome.log.steps.last() {
                println!("{} steps, final total loss {}", last.step, last.terms.total);
            }
        }
        Command::Eval {
            ckpt,
            data,
            split,
            report,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let r = eval_checkpoint(&ckpt, &manifest, split)?;
            r.write_files(&report)?;
            print!("{}", r.to_table());
            if !r.is_complete() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Infer {
            ckpt,
            input,
            roi,
            output,
        } => {
            let out = infer(&ckpt, &input, roi, &output)?;
            println!("{} ({}x{})", output.display(), out.width(), out.height());
        }
        Command::Bench { ckpt, size, iters } => {
            let (w, h) = parse_size(&size)?;
            let r = bench_checkpoint(&ckpt, w, h, iters)?;
            print!("{}{}", r.to_text(), r.to_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
