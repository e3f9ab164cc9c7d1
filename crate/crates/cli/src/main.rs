use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use neqsim::rnn::CellKind;
use neqsim_cli::commands::{self, ComplexityArgs};
use neqsim_cli::config::ExperimentConfig;
use neqsim_cli::error::CliError;

const RESULTS_SCHEMA: &str = "\
Outputs (under the output directory):
  results.csv   beta2,power_dbm,equalizer,hidden,seed,errors,bits,ber,config_hash
  summary.csv   beta2,power_dbm,equalizer,hidden,errors,bits,ber,config_hash  (pooled over seeds)
  ber_vs_power.svg, record.json, failures.csv (only when points fail)
BER is counted on the X polarization of the central channel over the test split.";

#[derive(Parser)]
#[command(
    name = "neqsim",
    version,
    about = "Coherent WDM link simulation with recurrent and Volterra post-equalizers"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Recompute cached datasets and models.
    #[arg(long, global = true)]
    force: bool,
    /// Sweep points processed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and cache the frame of every sweep point.
    #[command(
        after_help = "Outputs:\n  datasets.csv  beta2,power_dbm,seed,dataset,symbols,fde_errors,fde_bits,fde_ber,config_hash\n  cache/frames/<dataset>.nqsf"
    )]
    Generate,
    /// Train the selected equalizers on every sweep point.
    #[command(
        after_help = "Outputs:\n  weights/<model>_<point>.nqsr|.nqsv\n  history/<model>_<point>.csv  epoch,train_loss,val_loss,config_hash\n  (Volterra histories hold the X and Y lane MSE in the loss columns)"
    )]
    Train,
    /// Evaluate trained equalizers and FDE-only on the test split.
    #[command(after_help = RESULTS_SCHEMA)]
    Evaluate,
    /// Generate, train and evaluate every sweep point.
    #[command(after_help = RESULTS_SCHEMA)]
    Sweep,
    /// BER at every window position of a model with span equal to window.
    #[command(
        after_help = "Outputs:\n  per_position.csv  beta2,power_dbm,equalizer,hidden,position,errors,bits,ber,config_hash\n  per_position.svg"
    )]
    PerPosition,
    /// Parameter and multiplication counts (the IIA/IIB reference tables without arguments).
    #[command(
        after_help = "Output with --out: complexity.csv  table,equalizer,memory,hidden,output_symbols,params,total_mults,per_symbol_exact,per_symbol,config_hash"
    )]
    Complexity(ComplexityOpts),
    /// Re-hash the config and check the hash embedded in every artifact.
    Verify,
}

#[derive(Args)]
struct ComplexityOpts {
    /// Cell type for a custom recurrent count.
    #[arg(long)]
    kind: Option<CellKind>,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    features: usize,
    #[arg(long, default_value_t = 151)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    bits: usize,
    /// Output symbols per window (1 = many-to-one).
    #[arg(long, default_value_t = 1)]
    span: usize,
    /// Count multiplications exactly as the closed form is printed, without the 6HL term.
    #[arg(long)]
    as_printed: bool,
    /// Volterra memory lengths per order, e.g. 151,51,11.
    #[arg(long, value_delimiter = ',')]
    volterra: Vec<u64>,
    /// Real lanes multiplying the Volterra count.
    #[arg(long, default_value_t = 4)]
    lanes: u64,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this subcommand".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn log_run(cfg: &ExperimentConfig, command: &str, started: Instant, status: &str) {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or_default();
    let line = format!(
        "{stamp} {command} config_hash={} wall_clock_s={:.3} status={status}\n",
        cfg.hash(),
        started.elapsed().as_secs_f64()
    );
    let _ = std::fs::create_dir_all(&cfg.output_dir);
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(cfg.output_dir.join("run.log")) {
        let _ = f.write_all(line.as_bytes());
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Complexity(o) = &cli.command {
        let args = ComplexityArgs {
            kind: o.kind,
            hidden: o.hidden,
            features: o.features,
            window: o.window,
            bits: o.bits,
            span: o.span,
            as_printed: o.as_printed,
            volterra: o.volterra.clone(),
            lanes: o.lanes,
        };
        return commands::complexity(&args, cli.out.as_deref());
    }
    let cfg = load_config(cli)?;
    let started = Instant::now();
    let (name, result) = match cli.command {
        Command::Generate => ("generate", commands::generate(&cfg, cli.force, cli.workers)),
        Command::Train => ("train", commands::train(&cfg, cli.force, cli.workers)),
        Command::Evaluate => ("evaluate", commands::evaluate(&cfg, cli.workers)),
        Command::Sweep => ("sweep", commands::sweep(&cfg, cli.force, cli.workers)),
        Command::PerPosition => ("per-position", commands::per_position(&cfg, cli.force, cli.workers)),
        Command::Verify => return commands::verify(&cfg).map(|_| ()),
        Command::Complexity(_) => unreachable!("handled above"),
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("exit{}", e.exit_code()),
    };
    log_run(&cfg, name, started, &status);
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("neqsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
