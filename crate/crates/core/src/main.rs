use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fedsim::experiment::{execute, RunConfig};

/// Deterministic federated-learning simulator.
///
/// Runs FedAvg / FedProx / FedL2 / FedMAX on synthetic non-IID data or on a
/// labeled-vector CSV, tracking per-round test metrics and cross-device
/// activation divergence. CLI flags override the config file, which
/// overrides built-in defaults.
#[derive(Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    /// Flat key=value configuration file (# starts a comment).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Local objective: fedavg | fedprox | fedmax | fedl2.
    #[arg(long)]
    algo: Option<String>,

    /// Activation-regularizer scale (fedmax / fedl2).
    #[arg(long)]
    beta: Option<f64>,

    /// Proximal scale (fedprox).
    #[arg(long)]
    mu: Option<f64>,

    /// Communication rounds (T).
    #[arg(long)]
    rounds: Option<usize>,

    /// Local epochs per selected client (E).
    #[arg(long)]
    local_epochs: Option<usize>,

    /// Fraction of devices selected per round (C).
    #[arg(long)]
    clients_frac: Option<f64>,

    /// Total number of devices (M).
    #[arg(long)]
    devices: Option<usize>,

    /// Mini-batch size (N).
    #[arg(long)]
    batch_size: Option<usize>,

    /// Initial learning rate.
    #[arg(long)]
    eta0: Option<f64>,

    /// Per-round multiplicative learning-rate decay.
    #[arg(long)]
    lr_decay: Option<f64>,

    /// Master seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,

    /// Data source: synthetic | csv:<path>.
    #[arg(long)]
    data: Option<String>,

    /// Spread of per-device feature means (synthetic data).
    #[arg(long)]
    gamma1: Option<f64>,

    /// Spread of per-device label generators (synthetic data).
    #[arg(long)]
    gamma2: Option<f64>,

    /// Training samples per device (synthetic data).
    #[arg(long)]
    samples_per_device: Option<usize>,

    /// CSV partitioning: iid | noniid:<classes_per_device>.
    #[arg(long)]
    partition: Option<String>,

    /// Output directory for metrics.csv, shards.json and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Dump raw activation vectors for every training sample after the run.
    #[arg(long)]
    export_activations: bool,

    /// Write the final global model checkpoint.
    #[arg(long)]
    save_model: bool,

    /// Run the hyper-parameter sweep over this comma-separated beta grid
    /// instead of a single training run.
    #[arg(long)]
    sweep_betas: Option<String>,

    /// Seeds per sweep cell (seed, seed+1, ...).
    #[arg(long)]
    sweep_seeds: Option<usize>,

    /// Rounds per sweep cell (defaults to --rounds).
    #[arg(long)]
    sweep_rounds: Option<usize>,
}

fn build_config(cli: &Cli) -> fedsim::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.load_file(path)?;
    }

    let mut set = |key: &str, value: Option<String>| -> fedsim::Result<()> {
        if let Some(v) = value {
            cfg.apply_kv(key, &v)?;
        }
        Ok(())
    };
    set("algo", cli.algo.clone())?;
    set("beta", cli.beta.map(|v| v.to_string()))?;
    set("mu", cli.mu.map(|v| v.to_string()))?;
    set("rounds", cli.rounds.map(|v| v.to_string()))?;
    set("local_epochs", cli.local_epochs.map(|v| v.to_string()))?;
    set("clients_frac", cli.clients_frac.map(|v| v.to_string()))?;
    set("devices", cli.devices.map(|v| v.to_string()))?;
    set("batch_size", cli.batch_size.map(|v| v.to_string()))?;
    set("eta0", cli.eta0.map(|v| v.to_string()))?;
    set("lr_decay", cli.lr_decay.map(|v| v.to_string()))?;
    set("seed", cli.seed.map(|v| v.to_string()))?;
    set("data", cli.data.clone())?;
    set("gamma1", cli.gamma1.map(|v| v.to_string()))?;
    set("gamma2", cli.gamma2.map(|v| v.to_string()))?;
    set(
        "samples_per_device",
        cli.samples_per_device.map(|v| v.to_string()),
    )?;
    set("partition", cli.partition.clone())?;
    set("out", cli.out.as_ref().map(|p| p.display().to_string()))?;
    set("sweep_betas", cli.sweep_betas.clone())?;
    set("sweep_seeds", cli.sweep_seeds.map(|v| v.to_string()))?;
    set("sweep_rounds", cli.sweep_rounds.map(|v| v.to_string()))?;
    if cli.export_activations {
        cfg.export_activations = true;
    }
    if cli.save_model {
        cfg.save_model = true;
    }
    Ok(cfg)
}

fn run() -> fedsim::Result<()> {
    let cli = Cli::parse();
    let cfg = build_config(&cli)?;
    let summary = execute(&cfg)?;

    if let Some(fin) = &summary.final_metrics {
        println!(
            "run complete: {} rounds, final accuracy {} macro-F1 {} delta_bar {:.6}",
            cfg.rounds,
            fin.test_accuracy
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            fin.macro_f1
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            fin.delta_bar
        );
    }
    if let Some(cells) = &summary.sweep {
        for c in cells {
            println!(
                "sweep beta={}: mean accuracy {:.4} +/- {:.4} over {} seeds ({})",
                c.beta, c.mean_final_accuracy, c.sd_final_accuracy, c.n_seeds, c.status
            );
        }
    }
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
