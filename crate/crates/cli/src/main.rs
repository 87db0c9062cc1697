use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use transfusor::data::ExtractionMethod;
use transfusor::error::Error;
use transfusor_cli::checkpoint::ModelKind;
use transfusor_cli::commands;
use transfusor_cli::config::{resolve_out, RunConfig};

/// Conditional lane-change trajectory generation: extract labeled
/// trajectories from highway tracks, train diffusion and CVAE models,
/// sample, evaluate coverage and export denoising density grids.
#[derive(Parser)]
#[command(name = "transfusor", version)]
struct Cli {
    /// Flat key = value configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $TRANSFUSOR_OUT, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract labeled lane-change trajectories from raw tracks.
    Extract {
        /// Raw track file.
        tracks: PathBuf,
        /// Extraction method: fixed150, fixed300 or dynamic.
        #[arg(long)]
        method: Option<String>,
    },
    /// Print statistics of an extracted corpus.
    Stats {
        /// Corpus directory written by extract.
        corpus: PathBuf,
    },
    /// Train a model on an extracted corpus.
    Train {
        corpus: PathBuf,
        /// Model to train: transfusor or cvae.
        #[arg(long, default_value = "transfusor")]
        model: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Probability of dropping the condition during training.
        #[arg(long)]
        p_uncond: Option<f64>,
        /// Checkpoint cadence in epochs (0 = only at the end).
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Diffusion steps K.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        beta_start: Option<f64>,
        #[arg(long)]
        beta_end: Option<f64>,
    },
    /// Sample trajectories from a trained checkpoint.
    Generate {
        checkpoint: PathBuf,
        /// Category as class/direction/aggressiveness or an index 0..12;
        /// omit to generate every category into its own file.
        #[arg(long)]
        category: Option<String>,
        /// Trajectories per category.
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Classifier-free guidance weight.
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Coverage report of generated samples against a corpus.
    Evaluate {
        corpus: PathBuf,
        /// Transfusor checkpoint to evaluate.
        #[arg(long)]
        transfusor: Option<PathBuf>,
        /// CVAE checkpoint to evaluate.
        #[arg(long)]
        cvae: Option<PathBuf>,
        /// Comma-separated ADE thresholds in meters.
        #[arg(long)]
        thresholds: Option<String>,
        /// Generated samples per category; defaults to max(50, category size).
        #[arg(long)]
        n_gen: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Export per-step denoising density grids for one category.
    Viz {
        checkpoint: PathBuf,
        #[arg(long)]
        category: String,
        /// Comma-separated diffusion steps to snapshot;
        /// defaults to six even steps from K down to 0.
        #[arg(long)]
        steps: Option<String>,
        /// Chains to sample.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Grid cells per axis.
        #[arg(long, default_value_t = 50)]
        resolution: usize,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Generate synthetic raw tracks with a ground-truth sidecar.
    Synth {
        /// Flat key = value synthesis spec file.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Tracks per category (overrides the spec).
        #[arg(long)]
        per_category: Option<usize>,
    },
}

fn parse_list<T: FromStr>(flag: &'static str, s: &str) -> transfusor::Result<Vec<T>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| Error::usage(flag, format!("cannot parse {part:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> transfusor::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = resolve_out(cli.out);
    match cli.command {
        Command::Extract { tracks, method } => {
            if let Some(m) = method {
                cfg.method = ExtractionMethod::parse(&m)?;
            }
            commands::cmd_extract(&tracks, &out, &cfg)
        }
        Command::Stats { corpus } => commands::cmd_stats(&corpus),
        Command::Train {
            corpus,
            model,
            epochs,
            batch_size,
            learning_rate,
            p_uncond,
            checkpoint_every,
            steps,
            beta_start,
            beta_end,
        } => {
            let kind = match model.as_str() {
                "transfusor" => ModelKind::Transfusor,
                "cvae" => ModelKind::Cvae,
                other => {
                    return Err(Error::usage(
                        "train",
                        format!("unknown model {other:?}; valid: transfusor, cvae"),
                    ))
                }
            };
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = p_uncond {
                cfg.p_uncond = v;
            }
            if let Some(v) = checkpoint_every {
                cfg.checkpoint_every = v;
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            if let Some(v) = beta_start {
                cfg.beta_start = v;
            }
            if let Some(v) = beta_end {
                cfg.beta_end = v;
            }
            commands::cmd_train(&corpus, kind, &out, &cfg)
        }
        Command::Generate { checkpoint, category, n, guidance } => {
            if let Some(w) = guidance {
                cfg.guidance = w;
            }
            commands::cmd_generate(&checkpoint, category.as_deref(), n, &out, &cfg)
        }
        Command::Evaluate { corpus, transfusor, cvae, thresholds, n_gen, guidance } => {
            if let Some(w) = guidance {
                cfg.guidance = w;
            }
            let thresholds = match thresholds {
                Some(s) => Some(parse_list::<f64>("thresholds", &s)?),
                None => None,
            };
            commands::cmd_evaluate(
                &corpus,
                transfusor.as_deref(),
                cvae.as_deref(),
                thresholds,
                n_gen,
                &out,
                &cfg,
            )
        }
        Command::Viz { checkpoint, category, steps, n, resolution, guidance } => {
            if let Some(w) = guidance {
                cfg.guidance = w;
            }
            let steps = match steps {
                Some(s) => Some(parse_list::<usize>("steps", &s)?),
                None => None,
            };
            commands::cmd_viz(&checkpoint, &category, steps, n, resolution, &out, &cfg)
        }
        Command::Synth { spec, per_category } => {
            commands::cmd_synth(spec.as_deref(), per_category, &out, &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage { .. } | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
