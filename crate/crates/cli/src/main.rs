use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use envtwin::config::{self, RunConfig};
use envtwin::pipeline::{self, Step};
use envtwin::{presets, Error, Result};

/// Location-based RIS beam selection: simulate, label, train, evaluate.
#[derive(Parser)]
#[command(name = "envtwin", version, after_help = ENV_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "envtwin.json")]
    config: PathBuf,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override a config key, e.g. `--set model.learning_rate=0.0005`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

const ENV_HELP: &str = "Config keys can also be overridden through environment variables: \
ENVTWIN__MODEL__BATCH_SIZE=64 sets model.batch_size. Precedence, lowest first: config file, \
environment, --set, --seed/--out.";

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a starter config for the desk-scale scenario.
    Init,
    /// Save the scenario and codebook.
    Scenario,
    /// Label every receiver location by exhaustive search.
    Dataset,
    /// Train the rate surrogate on the training split.
    Train,
    /// Evaluate the trained surrogate on held-out locations.
    Eval,
    /// Train and evaluate over several training sizes and seeds.
    Sweep,
    /// Summarize evaluation and sweep results as Markdown.
    Report,
    /// Re-check every artifact listed in the manifest.
    Verify,
    /// scenario, dataset, train, eval and report in one go.
    Run,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut ov = config::env_overrides(std::env::vars());
    for s in &cli.sets {
        ov.push(config::parse_assignment(s)?);
    }
    if let Some(seed) = cli.seed {
        ov.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        let quoted = serde_json::to_string(&out.to_string_lossy()).expect("string encodes");
        ov.push(("output_dir".into(), quoted));
    }
    Ok(ov)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cmd = cli.command;
    if let Command::Init = cmd {
        if cli.config.exists() {
            return Err(Error::Config(format!(
                "{} already exists",
                cli.config.display()
            )));
        }
        let cfg = config::parse(
            &RunConfig::new(presets::desk(0), "runs/desk", 0).to_json_pretty(),
            &overrides(cli)?,
        )?;
        pipeline::write_atomic(&cli.config, cfg.to_json_pretty().as_bytes())?;
        println!("wrote {}", cli.config.display());
        return Ok(());
    }
    if let (Command::Verify, false, Some(out)) = (cmd, cli.config.exists(), &cli.out) {
        return verify(out);
    }
    let cfg = config::load(&cli.config, &overrides(cli)?)?;
    let step = match cmd {
        Command::Scenario => Step::Scenario,
        Command::Dataset => Step::Dataset,
        Command::Train => Step::Train,
        Command::Eval => Step::Eval,
        Command::Sweep => Step::Sweep,
        Command::Report => Step::Report,
        Command::Verify => return verify(&cfg.output_dir),
        Command::Run => return pipeline::run_all(&cfg),
        Command::Init => unreachable!(),
    };
    pipeline::run_step(&cfg, step)
}

fn verify(dir: &std::path::Path) -> Result<()> {
    let summary = pipeline::verify(dir)?;
    for p in &summary.problems {
        eprintln!("problem: {p}");
    }
    if summary.problems.is_empty() {
        println!(
            "{} artifacts verified in {}",
            summary.checked,
            dir.display()
        );
        Ok(())
    } else {
        Err(Error::Verify(format!(
            "{} of {} artifacts failed",
            summary.problems.len(),
            summary.checked
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
