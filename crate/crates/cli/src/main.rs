use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod config;
mod report;

#[derive(Parser)]
#[command(name = "cepfed", version, about = "Run and compare federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment (or a fixed-rank sweep) and write metrics.
    Run(RunArgs),
    /// Compare two summaries; exits 1 if the candidate regresses.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// JSON config; unspecified keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ceperfed, fedavg, fixed_rank, no_alpha or no_hsvd.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed ranks, comma separated; several ranks run a sweep.
    #[arg(long, value_delimiter = ',')]
    rank: Vec<usize>,
    /// Energy threshold for dynamic rank selection.
    #[arg(long)]
    eta: Option<f64>,
    /// Residual scaling factor.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    /// Dirichlet concentration of the label partition.
    #[arg(long)]
    dirichlet: Option<f64>,
    /// Output directory (default: config's out_dir, else ./cepfed-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    baseline: PathBuf,
    candidate: PathBuf,
    /// Largest accuracy drop that is not a regression.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
}

fn run(args: RunArgs) -> Result<()> {
    let (base, config_out) = match &args.config {
        Some(path) => {
            let rc = config::load(path)?;
            (rc.experiment, rc.out_dir)
        }
        None => (Default::default(), None),
    };
    let threads = std::env::var("CEPFED_THREADS").ok();
    let runs = config::resolve(base, &args, threads.as_deref())?;
    let out_dir = args
        .out
        .clone()
        .or(config_out)
        .unwrap_or_else(|| PathBuf::from("cepfed-out"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    for cfg in runs {
        let label = cfg.mode.label();
        let outcome = ceperfed::fedsim::run_experiment::<f64>(&cfg).with_context(|| format!("{label} run failed"))?;
        let csv_path = out_dir.join(format!("{label}.metrics.csv"));
        let file = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
        report::write_metrics(BufWriter::new(file), &outcome.rounds)?;
        let summary = report::summarize(&cfg, &outcome);
        let json_path = out_dir.join(format!("{label}.summary.json"));
        fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n")
            .with_context(|| format!("writing {}", json_path.display()))?;
        println!(
            "{label}: rounds={} final_acc={} best_acc={} mean_ratio={} upload_bytes={}",
            summary.rounds_run,
            fmt_opt(summary.final_accuracy),
            fmt_opt(summary.best_accuracy),
            fmt_opt(summary.mean_transmission_ratio),
            summary.upload_bytes
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn read_summary(path: &Path) -> Result<report::Summary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn compare(args: CompareArgs) -> Result<bool> {
    let base = read_summary(&args.baseline)?;
    let cand = read_summary(&args.candidate)?;
    let c = report::compare(&base, &cand, args.tolerance).context("refusing to compare")?;
    println!("baseline  {} final_acc={:.4}", base.mode, c.baseline_final);
    println!("candidate {} final_acc={:.4}", cand.mode, c.candidate_final);
    println!("accuracy_delta={:+.4}", c.accuracy_delta);
    println!("upload_bytes_delta={:+}", c.upload_bytes_delta);
    println!("download_bytes_delta={:+}", c.download_bytes_delta);
    if let Some(r) = c.ratio_delta {
        println!("transmission_ratio_delta={r:+.4}");
    }
    if c.regression {
        println!("regression: accuracy dropped by more than {}", args.tolerance);
    }
    Ok(!c.regression)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args).map(|_| true),
        Command::Compare(args) => compare(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
