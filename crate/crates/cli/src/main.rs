//! `capgen` — the command-line face of the captioning stack.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! checkpoint error, 3 numeric failure during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use capgen_core::checkpoint::Checkpoint;
use capgen_core::config::RunConfig;
use capgen_core::harness::{self, HarnessError};
use capgen_core::infer::DecodeConfig;

#[derive(Parser)]
#[command(
    name = "capgen",
    about = "Train and run a Vietnamese image-caption model on PPM images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per fold and write checkpoints plus a JSONL log.
    Train {
        /// JSON run configuration; defaults apply for every omitted key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory containing captions.jsonl and the images.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; overrides the config value.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of folds; 1 trains a single model on all data.
        #[arg(long)]
        folds: Option<usize>,
        /// Disable the noise-injection loss term.
        #[arg(long)]
        no_noise: bool,
        /// Disable train-time flip/crop augmentation.
        #[arg(long)]
        no_augment: bool,
        /// Keep captions raw instead of cleaning them.
        #[arg(long)]
        no_preprocess: bool,
    },
    /// Print the caption for one image.
    Caption {
        /// Checkpoint file (.vckp).
        ckpt: PathBuf,
        /// P6 PPM image.
        image: PathBuf,
        /// Beam width; 1 decodes greedily. Defaults to the checkpoint config.
        #[arg(long)]
        beam: Option<usize>,
        /// Maximum caption length in tokens, start marker included.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Caption a whole dataset and print the corpus BLEU4 report as JSON.
    Eval {
        /// Checkpoint file (.vckp).
        ckpt: PathBuf,
        /// Dataset directory containing captions.jsonl and the images.
        #[arg(long)]
        data: PathBuf,
        /// Also write the report JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Export per-token attention maps (P5 PGM) for one image.
    Attention {
        /// Checkpoint file (.vckp).
        ckpt: PathBuf,
        /// P6 PPM image.
        image: PathBuf,
        /// Directory for the idx_token.pgm files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
}

fn decode_settings(
    ckpt: &Checkpoint,
    beam: Option<usize>,
    max_len: Option<usize>,
) -> DecodeConfig {
    DecodeConfig {
        beam_width: beam.unwrap_or_else(|| ckpt.config.effective_beam()),
        max_len: max_len.unwrap_or(ckpt.config.decode.max_len),
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Train {
            config,
            data,
            out,
            seed,
            folds,
            no_noise,
            no_augment,
            no_preprocess,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::from_path(&path)?,
                None => RunConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(folds) = folds {
                cfg.folds = folds;
            }
            if no_noise {
                cfg.ablation.noise = false;
            }
            if no_augment {
                cfg.ablation.augment = false;
            }
            if no_preprocess {
                cfg.ablation.preprocess = false;
            }
            let outcome = harness::train(&cfg, &data, &out)?;
            println!(
                "trained {} fold(s); log: {}",
                outcome.checkpoint_paths.len(),
                outcome.log_path.display()
            );
            Ok(())
        }
        Command::Caption {
            ckpt,
            image,
            beam,
            max_len,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let decode = decode_settings(&ckpt, beam, max_len);
            println!("{}", harness::caption_image(&ckpt, &image, &decode)?);
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            out,
            beam,
            max_len,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let decode = decode_settings(&ckpt, beam, max_len);
            let outcome = harness::eval(&ckpt, &data, &decode)?;
            let json = serde_json::to_string(&outcome.report)
                .expect("BLEU report always serializes");
            if let Some(path) = out {
                std::fs::write(&path, format!("{json}\n")).map_err(|source| {
                    HarnessError::Io {
                        path: path.clone(),
                        source,
                    }
                })?;
            }
            println!("{json}");
            Ok(())
        }
        Command::Attention {
            ckpt,
            image,
            out,
            max_len,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let max_len = max_len.unwrap_or(ckpt.config.decode.max_len);
            let maps = harness::attention_maps(&ckpt, &image, &out, max_len)?;
            println!("wrote {} attention map(s) to {}", maps.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
