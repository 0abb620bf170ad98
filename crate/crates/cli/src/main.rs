use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use samgcnn::data::config::RunConfig;
use samgcnn::data::manifest::{Manifest, CLASS_NAMES};
use samgcnn::data::pipeline::{cmd_eval, cmd_extract, cmd_predict, cmd_train};
use samgcnn::data::synth::{synth_generate, SynthSpec};
use samgcnn::train::{Checkpoint, LOG_HEADER};
use samgcnn::Error;

#[derive(Parser)]
#[command(name = "samgcnn", version, about = "Segment-attention gated CNN for multi-channel activity classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (WAVs and manifest.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 12)]
        train_per_class: usize,
        #[arg(long, default_value_t = 1)]
        folds: u8,
        /// Seconds per clip.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long)]
        confusable_trio: bool,
    },
    /// Compute log-mel features and per-fold normalization statistics.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on one fold and write the best checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: u8,
        #[arg(long)]
        features: PathBuf,
        /// Output checkpoint; the epoch log goes to `<checkpoint>.log`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a fold's held-out test clips, optionally with a second (3-class) system.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: u8,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        checkpoint2: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one WAV file.
    Predict {
        audio: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        checkpoint2: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> samgcnn::Result<RunConfig> {
    path.as_ref().map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn load_pair(first: &PathBuf, second: &Option<PathBuf>) -> samgcnn::Result<(Checkpoint, Option<Checkpoint>)> {
    Ok((Checkpoint::load(first)?, second.as_ref().map(Checkpoint::load).transpose()?))
}

fn run(cmd: Command) -> samgcnn::Result<()> {
    match cmd {
        Command::Synth { out, seed, clips_per_class, train_per_class, folds, duration, channels, confusable_trio } => {
            let spec = SynthSpec { clips_per_class, train_per_class, folds, duration, channels, seed, confusable_trio, ..SynthSpec::default() };
            let m = synth_generate(&spec, &out)?;
            println!("wrote {} clips and {}", m.rows.len(), out.join("manifest.csv").display());
        }
        Command::Extract { manifest, features, config } => {
            let cfg = load_config(&config)?;
            let s = cmd_extract(&Manifest::load(&manifest)?, &cfg.frontend, &features)?;
            println!("wrote {} feature files and statistics for {} fold(s) to {}", s.feature_files, s.stats.len(), features.display());
        }
        Command::Train { manifest, fold, features, checkpoint, config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            println!("{LOG_HEADER}");
            let out = cmd_train(&Manifest::load(&manifest)?, fold, &cfg, &features, &checkpoint, |l| println!("{}", l.to_line()))?;
            println!("best epoch {} (validation accuracy {:.4}) saved to {}", out.best.epoch, out.best.val_acc, checkpoint.display());
        }
        Command::Eval { manifest, fold, features, checkpoint, checkpoint2, out } => {
            let (first, second) = load_pair(&checkpoint, &checkpoint2)?;
            let r = cmd_eval(&Manifest::load(&manifest)?, fold, &first, second.as_ref(), &features, &out)?;
            print!("{}", r.report);
        }
        Command::Predict { audio, checkpoint, checkpoint2, config } => {
            let cfg = load_config(&config)?;
            let (first, second) = load_pair(&checkpoint, &checkpoint2)?;
            let rec = cmd_predict(&audio, &cfg.frontend, &first, second.as_ref())?;
            println!("{}", CLASS_NAMES[rec.predicted]);
            println!("{}", rec.to_line());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                Error::Numeric(_) => 3,
                _ => 2,
            })
        }
    }
}
