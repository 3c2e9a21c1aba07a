use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stainfuse_core::config::{self, AppConfig};
use stainfuse_core::pipeline;
use stainfuse_core::Error;

#[derive(Parser, Debug)]
#[command(name = "stainfuse", version, about = "Paired-stain graph fusion for ordinal slide scoring")]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML config file; repeat to layer several.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Dotted override such as `model.strategy=gaimp`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build graphs for every heatmap in a directory.
    BuildGraphs {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model (or a grid) on a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on its test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine evaluation reports into one table and chart.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> stainfuse_core::Result<AppConfig> {
    let files: Vec<&std::path::Path> = cli.config.iter().map(PathBuf::as_path).collect();
    let mut sets = cli.set.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(j) = cli.jobs {
        sets.push(format!("jobs={j}"));
    }
    config::load(&files, &sets)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli, cfg: AppConfig) -> stainfuse_core::Result<u8> {
    let Some(command) = cli.command else {
        eprintln!("no command given; see --help");
        return Ok(2);
    };
    match command {
        Command::Generate { out } => {
            let m = pipeline::cmd_generate(&cfg, &out)?;
            println!("generated {} files in {}", m.outputs.len(), out.display());
        }
        Command::BuildGraphs { input, out } => {
            let (summary, _) = pipeline::cmd_build_graphs(&cfg, &input, &out)?;
            println!("{summary}");
            if summary.failed > 0 {
                return Ok(1);
            }
        }
        Command::Train { data, out } => {
            let run = pipeline::cmd_train(&cfg, &data, &out)?;
            let t = &run.outcome.trace;
            println!(
                "best validation loss {:.5} at iteration {} ({} iterations run{})",
                t.best_val_loss,
                t.best_iteration,
                t.iterations_run,
                if t.stopped_early { ", stopped early" } else { "" }
            );
            if let Some(it) = t.diverged_at {
                eprintln!("warning: training diverged at iteration {it}; best finite state kept");
            }
        }
        Command::Evaluate { checkpoint, data, out } => {
            let (report, _) = pipeline::cmd_evaluate(&cfg, &checkpoint, &data, &out)?;
            print!("{}", report.table());
        }
        Command::Report { out, reports } => {
            let (report, _) = pipeline::cmd_report(&cfg, &reports, &out)?;
            print!("{}", report.table());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    if cfg.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global() {
            log::warn!("could not size worker pool: {e}");
        }
    }
    match run(cli, cfg) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
