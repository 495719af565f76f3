//! `timed`: dataset generation, three-stage training, sampling, scoring and
//! ablation sweeps for multivariate time series.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use timed_core::pipeline::run::{prepare_dataset, write_samples_csv};
use timed_core::pipeline::{ablate, evaluate, sample, train, RunConfig, RunPaths, Stage, StageSelect, TrainOptions};
use timed_core::Error;

#[derive(Parser)]
#[command(name = "timed", version, about = "Diffusion-based generator for multivariate time series")]
struct Cli {
    /// Run configuration (JSON)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; defaults to the config's output_dir
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset and cache it in the output directory
    GenData,
    /// Train, resuming from the checkpoint in the output directory
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Run stage 3 without completed pretraining
        #[arg(long)]
        from_scratch: bool,
    },
    /// Draw sequences from the trained model into samples.csv
    Sample {
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// Write values in the original data scale instead of [0, 1]
        #[arg(long)]
        denormalize: bool,
    },
    /// Score the trained model against held-out data
    Eval,
    /// Train and score the full model and every single-component removal
    Ablate,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

impl StageArg {
    fn select(self) -> StageSelect {
        match self {
            StageArg::One => StageSelect::One(Stage::Supervisor),
            StageArg::Two => StageSelect::One(Stage::Diffusion),
            StageArg::Three => StageSelect::One(Stage::Joint),
            StageArg::All => StageSelect::All,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config_path) = cli.config.clone() else {
        usage_error("--config <PATH> is required");
    };
    if !config_path.is_file() {
        usage_error(&format!("config file {} does not exist", config_path.display()));
    }
    match run(&cli, &config_path) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn usage_error(msg: &str) -> ! {
    use clap::CommandFactory;
    Cli::command()
        .error(clap::error::ErrorKind::MissingRequiredArgument, msg)
        .exit()
}

fn run(cli: &Cli, config_path: &Path) -> Result<Value, Error> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    // relative CSV paths in the config are relative to the config file
    let base = config_path.parent().unwrap_or(Path::new("."));
    let paths = RunPaths::new(config.output_dir.clone());
    let dir = paths.root.display().to_string();

    Ok(match cli.command {
        Command::GenData => {
            let ds = prepare_dataset(&config, &paths, base)?;
            json!({
                "command": "gen-data",
                "name": ds.name,
                "shape": [ds.len(), ds.seq_len(), ds.features()],
                "path": paths.dataset().display().to_string(),
            })
        }
        Command::Train { stage, from_scratch } => {
            let t = train(
                &config,
                &paths,
                base,
                TrainOptions {
                    stages: stage.select(),
                    from_scratch,
                },
            )?;
            let epochs: Vec<usize> = Stage::ALL.iter().map(|&s| t.completed_epochs(s)).collect();
            json!({
                "command": "train",
                "epochs": epochs,
                "log": paths.log().display().to_string(),
                "checkpoint": paths.checkpoint().display().to_string(),
            })
        }
        Command::Sample { n, denormalize } => {
            let ds = sample(&config, &paths, n, denormalize)?;
            write_samples_csv(&paths.samples(), &ds)?;
            json!({
                "command": "sample",
                "shape": [ds.len(), ds.seq_len(), ds.features()],
                "path": paths.samples().display().to_string(),
            })
        }
        Command::Eval => {
            let out = evaluate(&config, &paths, base)?;
            let scores: serde_json::Map<String, Value> = out
                .reports
                .iter()
                .map(|r| (r.metric.clone(), json!({ "mean": r.mean, "std": r.std })))
                .collect();
            json!({ "command": "eval", "scores": scores, "dir": dir })
        }
        Command::Ablate => {
            let rows = ablate(&config, &paths, base)?;
            json!({
                "command": "ablate",
                "variants": rows.iter().map(|r| r.variant.clone()).collect::<Vec<_>>(),
                "path": paths.ablation().display().to_string(),
            })
        }
    })
}
