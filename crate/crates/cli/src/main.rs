use std::path::PathBuf;
use std::process::ExitCode;

use attrshield::config::RunConfig;
use attrshield::pipeline::{render_report, Pipeline, Stage};
use attrshield::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attrshield", version, about = "Probe and shield spurious attributes in a small vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set sas.lambda=4`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (same as `--set output_dir=...`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Datagen(RunArgs),
    /// Pre-train the base model.
    Pretrain(RunArgs),
    /// Probe attributes and flag spurious ones.
    Probe(RunArgs),
    /// Build pseudo categories for the flagged attributes.
    Shield(RunArgs),
    /// Fine-tune the baseline and shielded models.
    Train(RunArgs),
    /// Evaluate both models and write reports.
    Eval(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Compare the reports of one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn resolve(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut overrides = args.overrides.clone();
    if let Some(out) = &args.out {
        overrides.push(format!("output_dir={:?}", out.display().to_string()));
    }
    RunConfig::load(args.config.as_deref(), &overrides)
}

fn run(command: Command) -> Result<(), Error> {
    let (stage, args) = match command {
        Command::Report { runs } => {
            print!("{}", render_report(&runs)?);
            return Ok(());
        }
        Command::All(args) => {
            let pipeline = Pipeline::new(resolve(&args)?);
            let reports = pipeline.run_all()?;
            print!("{}", attrshield::eval::render_table(&reports));
            return Ok(());
        }
        Command::Datagen(a) => (Stage::Datagen, a),
        Command::Pretrain(a) => (Stage::Pretrain, a),
        Command::Probe(a) => (Stage::Probe, a),
        Command::Shield(a) => (Stage::Shield, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Eval(a) => (Stage::Eval, a),
    };
    Pipeline::new(resolve(&args)?).run(stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
