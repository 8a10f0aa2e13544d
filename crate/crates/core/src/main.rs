use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use brainrot::config::{parse_config_text, RunConfig};
use brainrot::pipeline::{run, Stage};
use brainrot::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Synth,
    Pretrain,
    Extract,
    Train,
    Predict,
    Interpret,
    Evaluate,
    BagAnalyze,
    Simcheck,
    Pipeline,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Stage {
        match c {
            Command::Synth => Stage::Synth,
            Command::Pretrain => Stage::Pretrain,
            Command::Extract => Stage::Extract,
            Command::Train => Stage::Train,
            Command::Predict => Stage::Predict,
            Command::Interpret => Stage::Interpret,
            Command::Evaluate => Stage::Evaluate,
            Command::BagAnalyze => Stage::BagAnalyze,
            Command::Simcheck => Stage::Simcheck,
            Command::Pipeline => Stage::Pipeline,
        }
    }
}

/// Two-stage ViT + CNN brain-age pipeline.
///
/// Any `--section.key=value` flag overrides the matching config file entry.
#[derive(Debug, Parser)]
#[command(name = "brainrot", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Global seed for every stage.
    #[arg(long)]
    seed: Option<u64>,

    /// Run directory for all artifacts.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

/// Pulls `--section.key=value` overrides out of argv before clap sees it.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let dotted = arg
            .strip_prefix("--")
            .map(|a| a.split('=').next().unwrap_or("").contains('.'))
            .unwrap_or(false);
        if !dotted {
            rest.push(arg);
            continue;
        }
        let (k, v) = arg[2..]
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{arg}` needs the form --section.key=value")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    Ok((rest, overrides))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("BRAINROT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("BRAINROT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn real_main() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    configure_threads()?;

    let mut entries = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            parse_config_text(&text)?
        }
        None => Default::default(),
    };
    entries.extend(overrides);
    if let Some(seed) = cli.seed {
        entries.insert("seed".into(), seed.to_string());
    }
    if let Some(out) = &cli.out {
        entries.insert("io.out".into(), out.display().to_string());
    }
    let cfg = RunConfig::from_entries(&entries)?;
    let prov = run(cli.command.into(), &cfg)?;
    for (path, sum) in &prov.artifacts {
        log::info!("{sum}  {path}");
    }
    println!(
        "{} finished: {} artifacts in {}",
        prov.subcommand,
        prov.artifacts.len(),
        cfg.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
