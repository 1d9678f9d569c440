use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mitodet::cli::{self, EvaluateOptions, Split};
use mitodet::config::RunConfig;
use mitodet::Result;

#[derive(Parser)]
#[command(name = "mitodet", version, about = "Multi-task mitosis detector")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (flat TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set output.dir=DIR`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(dir) = &self.output {
            overrides.push(format!("output.dir={}", toml_string(&dir.display().to_string())));
        }
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides),
            None => RunConfig::from_toml_with("", &overrides),
        }
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and write checkpoints and a JSON-lines log.
    Train(ConfigArgs),
    /// Evaluate a checkpoint and write JSON/CSV reports.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// Operating threshold for precision/recall/F1.
        #[arg(long)]
        score_thr: Option<f64>,
    },
    /// Train and evaluate all eight component combinations.
    Ablate(ConfigArgs),
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        n_cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::Train(c) => print_json(&cli::cmd_train(&c.load()?)?),
        Command::Evaluate { config, checkpoint, split, score_thr } => {
            let opts = EvaluateOptions { split, score_threshold: score_thr };
            print_json(&cli::cmd_evaluate(&config.load()?, &checkpoint, opts)?)
        }
        Command::Ablate(c) => {
            let rows = cli::cmd_ablate(&c.load()?)?;
            print!("{}", mitodet::eval::ablation_csv(&rows));
            Ok(())
        }
        Command::Synth { n_cases, seed, image_size, out } => {
            print_json(&cli::cmd_synth(n_cases, seed, image_size, &out)?)
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
