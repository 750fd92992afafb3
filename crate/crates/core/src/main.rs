use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use data_factory::config::FactoryConfig;
use data_factory::error::{FactoryError, Result};
use data_factory::pipeline::{self, AblationMode, RunOptions};

/// Synthetic detection data factory: adapt a source generator to a target
/// domain, synthesize labeled images, and fine-tune a detector on them.
#[derive(Parser, Debug)]
#[command(name = "data-factory", version)]
struct Cli {
    /// JSON config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Dotted config override, e.g. `--set adapt.iters=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the desk source generator and discriminator.
    PretrainGenerator,
    /// Train the source detector.
    PretrainSource,
    /// Adapt the pretrained generator to the few-shot target images.
    Adapt,
    /// Train the label head on the manual annotations.
    LabelTrain {
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Sample a labeled target dataset from the adapted generator.
    Synthesize {
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Label adapted-generator samples with the source detector.
    PseudoLabel {
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Fine-tune the source detector on a synthesized dataset.
    Finetune {
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Report AP of a detector on a labeled dataset.
    Evaluate {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// All stages end to end.
    Pipeline {
        /// Skip stages already completed under the same config.
        #[arg(long)]
        resume: bool,
    },
    /// Full method against the baselines over several seeds.
    Benchmark {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
        samples: Vec<usize>,
    },
    /// Run one ablation.
    Ablate {
        #[arg(long, value_parser = parse_mode)]
        mode: AblationMode,
    },
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode {s:?}; expected no-text, no-fewshot, no-freeze or samples-sweep"))
}

fn load_config(cli: &Cli) -> Result<FactoryConfig> {
    let base = match &cli.config {
        Some(p) => FactoryConfig::load(p)?,
        None => FactoryConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out: &Path = &cli.out;
    match &cli.command {
        Command::PretrainGenerator => pipeline::cmd_pretrain_generator(&cfg, out),
        Command::PretrainSource => pipeline::cmd_pretrain_source(&cfg, out),
        Command::Adapt => pipeline::cmd_adapt(&cfg, out),
        Command::LabelTrain { generator } => pipeline::cmd_label_train(&cfg, out, generator.as_deref()),
        Command::Synthesize { generator, head } => pipeline::cmd_synthesize(&cfg, out, generator.as_deref(), head.as_deref()),
        Command::PseudoLabel { generator, detector } => pipeline::cmd_pseudo_label(&cfg, out, generator.as_deref(), detector.as_deref()),
        Command::Finetune { detector, dataset } => pipeline::cmd_finetune(&cfg, out, detector.as_deref(), dataset.as_deref()),
        Command::Evaluate { detector, dataset } => print_json(&pipeline::cmd_evaluate(&cfg, out, detector, dataset)?),
        Command::Pipeline { resume } => print_json(&pipeline::run_all(&cfg, out, RunOptions { resume: *resume })?.metrics),
        Command::Benchmark { seeds, samples } => {
            if seeds.is_empty() {
                return Err(FactoryError::argument("--seeds is empty"));
            }
            print_json(&pipeline::run_benchmark(&cfg, seeds, samples, out)?.mean)
        }
        Command::Ablate { mode } => print_json(&pipeline::run_ablation(&cfg, *mode, out)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FactoryError::Config(_) | FactoryError::Argument(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
