use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use befuzz_core::campaign::{run_pipeline, CampaignConfig, Layout, PipelineError, PipelineOptions, Stage};
use befuzz_service::{ServiceError, DEFAULT_BIND};
use clap::{Parser, Subcommand};

/// Behavior-driven fuzzing harness for CLI coding agents.
#[derive(Parser)]
#[command(name = "befuzz", version)]
struct Cli {
    /// Campaign directory. Defaults to `output_root` from the config.
    #[arg(long, global = true)]
    campaign: Option<PathBuf>,
    /// Campaign config (TOML). Defaults to `<campaign>/campaign.toml`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Re-run stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Worker count for instantiate and run; overrides `limits.parallel`.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Screen catalog pairs and write seed templates.
    Compose,
    /// Turn seed templates into repository-grounded cases.
    Instantiate,
    /// Execute every case against every configured agent.
    Run,
    /// Classify run evidence into verdicts.
    Check,
    /// Compute campaign metrics from verdicts and labels.
    Report {
        /// Also rank origins per configuration.
        #[arg(long)]
        per_config: bool,
        /// Number of ranking rows to keep.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Serve the triage API for a campaign.
    Serve {
        #[arg(long, default_value = DEFAULT_BIND)]
        bind: SocketAddr,
    },
    /// Run all five stages in order.
    All,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("befuzz: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("befuzz: {e:#}");
            ExitCode::from(1)
        }
    }
}

enum Failure {
    /// Exit status 2: the invocation or configuration is wrong.
    Config(anyhow::Error),
    /// Exit status 1: a stage failed.
    Stage(anyhow::Error),
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    if let Command::Serve { bind } = cli.command {
        let dir = cli.campaign.ok_or_else(|| config_err(anyhow!("serve needs --campaign <dir>")))?;
        let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Stage(e.into()))?;
        return rt.block_on(befuzz_service::serve(&dir, bind)).map_err(|e| match e {
            ServiceError::NonLoopback(_) | ServiceError::UnknownCampaign(_) => config_err(e),
            e => Failure::Stage(e.into()),
        });
    }

    let config_path = match (&cli.config, &cli.campaign) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join("campaign.toml"),
        (None, None) => return Err(config_err(anyhow!("pass --config <file> or --campaign <dir>"))),
    };
    let mut config = CampaignConfig::load(&config_path)
        .with_context(|| format!("loading {}", config_path.display()))
        .map_err(config_err)?;
    let root = match (&cli.campaign, &config.output_root) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => return Err(config_err(anyhow!("no campaign directory: pass --campaign or set output_root"))),
    };

    let stages: Vec<Stage> = match cli.command {
        Command::Compose => vec![Stage::Compose],
        Command::Instantiate => vec![Stage::Instantiate],
        Command::Run => vec![Stage::Run],
        Command::Check => vec![Stage::Check],
        Command::Report { per_config, top } => {
            config.report.per_config |= per_config;
            if let Some(k) = top {
                config.report.top = k;
            }
            vec![Stage::Report]
        }
        Command::All => Stage::ALL.to_vec(),
        Command::Serve { .. } => unreachable!(),
    };
    let opts = PipelineOptions {
        force: cli.force,
        parallel: cli.parallel,
    };
    let outcomes = run_pipeline(&config, &Layout::new(&root), &stages, &opts).map_err(|e| match e {
        PipelineError::Config(_) => config_err(e),
        e => Failure::Stage(e.into()),
    })?;
    for o in outcomes {
        if o.skipped {
            println!("{:<12} up to date", o.stage);
        } else {
            println!("{:<12} done: {}", o.stage, o.summary);
        }
    }
    if stages.contains(&Stage::Report) {
        print_report(&root);
    }
    Ok(())
}

fn print_report(root: &Path) {
    if let Ok(text) = std::fs::read_to_string(Layout::new(root).report_text()) {
        print!("\n{text}");
    }
}
