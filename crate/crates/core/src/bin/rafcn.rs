use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rafcn::commands;
use rafcn::config::RunConfig;
use rafcn::data::Split;
use rafcn::gradsuite;
use rafcn::{Error, OpKind, Result};

/// Relation-augmented FCN for synthetic aerial segmentation.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the shuffle, initialisation and generator seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint for eval and predict, or to resume training from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Split scored by eval.
    #[arg(long, global = true, default_value = "test")]
    split: Split,
    /// Print the default configuration and exit.
    #[arg(long)]
    print_default_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset to <out>/data.
    Generate,
    /// Train on <out>/data; with --checkpoint, resume from it.
    Train,
    /// Score --checkpoint on --split; writes <out>/eval_<split>.json.
    Eval {
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Label one PPM tile with --checkpoint.
    Predict {
        image: PathBuf,
        /// Output PGM with one class index per pixel.
        labels: PathBuf,
        /// Optional PPM coloured with the class legend.
        color: Option<PathBuf>,
    },
    /// Compare analytic and numerical gradients.
    Gradcheck {
        /// Corrupt the backward pass of one operation, e.g. `conv3x3`.
        #[arg(long)]
        fault: Option<String>,
    },
    /// Train and test all five integration modes.
    Ablate,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn need_checkpoint(cli: &Cli) -> Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Usage("this command needs --checkpoint".into()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if cli.print_default_config {
        print!("{}", RunConfig::default().to_json()?);
        return Ok(true);
    }
    let Some(command) = &cli.command else {
        return Err(Error::Usage("no subcommand given; see --help".into()));
    };
    let cfg = load_config(&cli)?;
    match command {
        Command::Generate => {
            let dir = commands::cmd_generate(&cfg)?;
            println!("wrote dataset to {}", dir.display());
        }
        Command::Train => {
            let summary = commands::cmd_train(&cfg, cli.checkpoint.as_deref())?;
            println!(
                "stopped at iteration {}{}; best validation loss {:.5}",
                summary.iters,
                if summary.stopped_early { " (early stop)" } else { "" },
                summary.best_val_loss
            );
        }
        Command::Eval { data } => {
            let report = commands::cmd_eval(need_checkpoint(&cli)?, cli.split, data.as_deref())?;
            print!("{}", report.to_table());
            std::fs::create_dir_all(&cfg.output_dir)?;
            let name = format!("eval_{}.json", cli.split.as_str());
            write_json(&cfg.output_dir.join(name), &report)?;
        }
        Command::Predict { image, labels, color } => {
            commands::cmd_predict(need_checkpoint(&cli)?, image, labels, color.as_deref())?;
            println!("wrote {}", labels.display());
        }
        Command::Gradcheck { fault } => {
            let fault = fault
                .as_deref()
                .map(|name| {
                    OpKind::from_name(name).ok_or_else(|| {
                        let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                        Error::Usage(format!("unknown op {name:?}; expected one of {}", known.join(", ")))
                    })
                })
                .transpose()?;
            let results = commands::cmd_gradcheck(fault)?;
            print!("{}", gradsuite::format_report(&results));
            return Ok(results.iter().all(|r| r.passed()));
        }
        Command::Ablate => {
            let rows = commands::cmd_ablate(&cfg)?;
            print!("{}", commands::format_ablation(&rows));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
