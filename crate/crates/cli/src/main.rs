//! `gkt`: launch group knowledge transfer experiments — all-in-one
//! simulations, distributed server/client processes, data partitioning,
//! cost reports and the FedAvg/centralized baselines.

mod commands;
mod config;
mod remote;

use clap::{Parser, Subcommand};
use config::{parse_config_file, CliError, Overrides, Role, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gkt", version, about = "group knowledge transfer trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat key=value config file; command-line flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset (this is also the default)
    #[arg(long)]
    toy: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full protocol with every party in one process
    Sim(RunArgs),
    /// Host the coordinator and the server model over TCP
    Server(RunArgs),
    /// Run one client session against a remote coordinator
    Client(RunArgs),
    /// Emit a partition plan file
    Partition {
        /// Number of clients
        #[arg(long)]
        k: usize,
        /// Dirichlet concentration
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample count when no dataset is given
        #[arg(long, default_value_t = 800)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Partition real CIFAR-10 labels from this directory instead
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "partition.txt")]
        out: PathBuf,
    },
    /// Print a parameter/FLOP/communication cost report as JSON
    Cost {
        /// Edge architecture: resnet8 | resnet4 | resnet6 | toy:<base>
        #[arg(long, default_value = "resnet8")]
        model: String,
        /// Server architecture: r55 | r109 | toy:<blocks-per-stage>
        #[arg(long, default_value = "r55")]
        server_depth: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Dataset size entering the closed-form communication cost
        #[arg(long, default_value_t = 50_000)]
        samples: u64,
        #[arg(long, default_value_t = 100)]
        rounds: usize,
        /// Epoch budget for the split-training comparison
        #[arg(long, default_value_t = 100)]
        sl_epochs: u64,
    },
    /// Train a reference baseline on the stacked single model
    Baseline {
        /// fedavg | centralized
        which: String,
        #[command(flatten)]
        args: RunArgs,
    },
}

fn resolve(role: Role, args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::toy(role);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        cfg.apply(&parse_config_file(&text)?);
    }
    cfg.apply(&args.overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sim(args) => {
            let cfg = resolve(Role::Sim, &args)?;
            commands::run_sim(&cfg)?;
            Ok(())
        }
        Command::Server(args) => remote::run_server(&resolve(Role::Server, &args)?),
        Command::Client(args) => remote::run_client(&resolve(Role::Client, &args)?),
        Command::Partition {
            k,
            alpha,
            seed,
            n,
            classes,
            data_dir,
            out,
        } => commands::run_partition(k, alpha, seed, n, classes, data_dir.as_deref(), &out),
        Command::Cost {
            model,
            server_depth,
            classes,
            samples,
            rounds,
            sl_epochs,
        } => {
            let mut cfg = RunConfig::toy(Role::Sim);
            cfg.edge_variant = model;
            cfg.server_depth = server_depth;
            cfg.classes = classes;
            cfg.rounds = rounds;
            cfg.dataset = "cifar10".into();
            cfg.data_dir = Some(PathBuf::from("."));
            cfg.validate()?;
            let report = commands::cost_report(&cfg, samples, sl_epochs);
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(())
        }
        Command::Baseline { which, args } => {
            let cfg = resolve(Role::Sim, &args)?;
            commands::run_baseline(&cfg, &which)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GKT_LOG", "info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
