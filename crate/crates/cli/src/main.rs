use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eeg2img::gradsuite::SuiteConfig;
use eeg2img_cli::config::{parse_override, read_table};
use eeg2img_cli::{ablate, commands, init_logging, RunConfig};

#[derive(Parser)]
#[command(name = "eeg2img", version, about = "EEG encoder and conditional latent diffusion experiments")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set encoder.latent_dim=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load), normalize and split the dataset.
    GenData,
    /// Train the encoder with the triplet objective.
    TrainEncoder,
    /// Clustering, KNN and classification accuracy of a frozen encoder.
    Eval {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Train on the seen classes, evaluate the held-out ones.
    ZeroShot,
    /// Train the denoiser on frozen-encoder token sequences.
    TrainDiffusion {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Sample one latent per test recording; class match, IS and FID.
    Generate {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
    },
    /// Run the `ablate` grid or cell list.
    Ablate,
    /// Finite-difference gradient checks of every op and model path.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        op_trials: usize,
        #[arg(long, default_value_t = 6)]
        model_trials: usize,
    },
}

fn run(cli: Cli) -> eeg2img::Result<()> {
    let overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<eeg2img::Result<Vec<_>>>()?;
    let base = read_table(cli.config.as_deref())?;
    let cfg = RunConfig::resolve(&base, &overrides)?;
    log::info!("event=config fingerprint={} out={}", cfg.fingerprint(), cli.out.display());
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, out),
        Command::TrainEncoder => commands::train_encoder(&cfg, out),
        Command::Eval { encoder } => commands::eval(&cfg, out, &encoder),
        Command::ZeroShot => commands::zero_shot(&cfg, out),
        Command::TrainDiffusion { encoder } => commands::train_diffusion(&cfg, out, &encoder),
        Command::Generate { encoder, denoiser } => commands::generate(&cfg, out, &encoder, &denoiser),
        Command::Ablate => ablate::run(&base, &overrides, &cfg, out).map(|_| ()),
        Command::Gradcheck { op_trials, model_trials } => {
            let suite = SuiteConfig {
                op_trials,
                model_trials,
                seed: cfg.seed,
                ..SuiteConfig::default()
            };
            commands::gradcheck(&cfg, out, &suite)
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("event=failed code={} error={:?}", e.exit_code(), e.to_string());
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
