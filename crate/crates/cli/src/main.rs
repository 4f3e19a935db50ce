use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gasfgan::DayClass;
use gasfgan_cli::commands::{self, Context};
use gasfgan_cli::config::{parse_missing_rates, RunConfig};
use gasfgan_cli::{CliError, OutputLock};

#[derive(Parser)]
#[command(
    name = "gasfgan",
    version,
    about = "Traffic flow imputation with GASF images and a GAN"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "gasfgan.toml")]
    config: PathBuf,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load raw CSVs into per-sensor, per-day-class datasets.
    Ingest,
    /// Group sensors by daily-profile quantiles with k-means.
    Cluster {
        /// Fixed number of clusters; skips the elbow sweep.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train one model per cluster and day class.
    Train {
        #[arg(long)]
        cluster: Option<usize>,
        #[arg(long)]
        day_class: Option<DayClass>,
        /// Continue from the last saved checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run the missing-rate sweep on held-out days, or impute one CSV.
    Impute {
        /// Comma-separated missing rates, e.g. `0.05,0.2` or `5%,20%`.
        #[arg(long)]
        mr: Option<String>,
        #[arg(long)]
        cluster: Option<usize>,
        #[arg(long)]
        day_class: Option<DayClass>,
        /// CSV of corrupted days to impute instead of running the sweep.
        #[arg(long)]
        one_shot: Option<PathBuf>,
    },
    /// Aggregate sweep metrics by sensor, cluster and missing rate.
    Evaluate,
    /// Render plots and a markdown summary.
    Report,
    /// Write a CSV of synthetic sensors with planted daily patterns.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        groups: usize,
        #[arg(long, default_value_t = 4)]
        per_group: usize,
        #[arg(long, default_value_t = 60)]
        days: usize,
        #[arg(long, default_value_t = 288)]
        intervals: usize,
        /// Fraction of days that lose 30% of their intervals.
        #[arg(long, default_value_t = 0.1)]
        gappy: f64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    if !cli.config.is_file() {
        return Err(CliError::Config(format!(
            "config file {} does not exist",
            cli.config.display()
        )));
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Synth {
        out,
        groups,
        per_group,
        days,
        intervals,
        gappy,
    } = &cli.command
    {
        return commands::cmd_synth(
            out,
            *groups,
            *per_group,
            *days,
            *intervals,
            *gappy,
            cli.seed.unwrap_or(0),
        );
    }
    let mut cfg = load_config(&cli)?;
    // Flag values are checked with the rest of the config, before any work.
    let rates = match &cli.command {
        Command::Impute { mr: Some(list), .. } => Some(parse_missing_rates(list)?),
        _ => None,
    };
    if let Some(r) = &rates {
        cfg.evaluate.missing_rates = r.clone();
    }
    if let Command::Impute {
        one_shot: Some(f), ..
    } = &cli.command
    {
        if !f.is_file() {
            return Err(CliError::Config(format!(
                "one-shot input {} does not exist",
                f.display()
            )));
        }
    }
    let ctx = Context::new(cfg);
    let _lock = OutputLock::acquire(&ctx.layout.root)?;
    match cli.command {
        Command::Ingest => commands::cmd_ingest(&ctx).map(drop),
        Command::Cluster { k } => commands::cmd_cluster(&ctx, k).map(drop),
        Command::Train {
            cluster,
            day_class,
            resume,
        } => commands::cmd_train(&ctx, cluster, day_class, resume).map(drop),
        Command::Impute {
            cluster,
            day_class,
            one_shot,
            ..
        } => match one_shot {
            Some(f) => commands::cmd_impute_one_shot(&ctx, &f, day_class).map(drop),
            None => {
                let rates = ctx.config.evaluate.missing_rates.clone();
                commands::cmd_impute_sweep(&ctx, &rates, cluster, day_class).map(drop)
            }
        },
        Command::Evaluate => commands::cmd_evaluate(&ctx),
        Command::Report => commands::cmd_report(&ctx).map(drop),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
