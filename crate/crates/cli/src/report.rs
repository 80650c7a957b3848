use std::io::Write;

use anyhow::{bail, Result};
use ceperfed::fedsim::ExperimentOutcome;
use ceperfed::{ExperimentConfig, RoundMetrics};
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: [&str; 10] = [
    "round",
    "client",
    "loss",
    "accuracy",
    "upload_bytes",
    "download_bytes",
    "transmission_ratio",
    "mean_rank_part1",
    "mean_rank_part2",
    "mean_rank_part3",
];

fn rank_field(r: Option<f64>) -> String {
    r.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics<W: Write>(out: W, rounds: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for m in rounds {
        for c in &m.clients {
            w.write_record([
                m.round.to_string(),
                c.client.to_string(),
                c.train_loss.to_string(),
                c.test_accuracy.to_string(),
                c.upload_bytes.to_string(),
                c.download_bytes.to_string(),
                c.transmission_ratio.to_string(),
                rank_field(c.mean_rank[0]),
                rank_field(c.mean_rank[1]),
                rank_field(c.mean_rank[2]),
            ])?;
        }
        w.write_record([
            m.round.to_string(),
            "global".into(),
            m.global_loss.to_string(),
            m.global_accuracy.to_string(),
            m.upload_bytes.to_string(),
            m.download_bytes.to_string(),
            m.transmission_ratio.to_string(),
            rank_field(m.mean_rank[0]),
            rank_field(m.mean_rank[1]),
            rank_field(m.mean_rank[2]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub rounds_requested: usize,
    pub rounds_run: usize,
    pub stopped_early: bool,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub best_round: Option<usize>,
    /// Mean and standard deviation of the final per-client test accuracies.
    pub final_client_accuracy_mean: Option<f64>,
    pub final_client_accuracy_std: Option<f64>,
    /// Mean transmission ratio over the first 100 rounds.
    pub mean_transmission_ratio: Option<f64>,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub initial_download_bytes: u64,
    pub accuracy_curve: Vec<f64>,
    pub config: ExperimentConfig,
}

pub fn summarize(config: &ExperimentConfig, outcome: &ExperimentOutcome<f64>) -> Summary {
    let rounds = &outcome.rounds;
    let best = rounds
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
            Some((_, b)) if b >= m.global_accuracy => acc,
            _ => Some((i, m.global_accuracy)),
        });
    let first: Vec<f64> = rounds.iter().take(100).map(|m| m.transmission_ratio).collect();
    let (client_mean, client_std) = match rounds.last() {
        Some(last) if !last.clients.is_empty() => {
            let accs: Vec<f64> = last.clients.iter().map(|c| c.test_accuracy).collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
            (Some(mean), Some(var.sqrt()))
        }
        _ => (None, None),
    };
    Summary {
        mode: config.mode.label(),
        seed: config.seed,
        rounds_requested: config.rounds,
        rounds_run: rounds.len(),
        stopped_early: outcome.stopped_early,
        final_accuracy: rounds.last().map(|m| m.global_accuracy),
        best_accuracy: best.map(|b| b.1),
        best_round: best.map(|b| b.0),
        final_client_accuracy_mean: client_mean,
        final_client_accuracy_std: client_std,
        mean_transmission_ratio: (!first.is_empty()).then(|| first.iter().sum::<f64>() / first.len() as f64),
        upload_bytes: rounds.iter().map(|m| m.upload_bytes as u64).sum(),
        download_bytes: rounds.iter().map(|m| m.download_bytes as u64).sum(),
        initial_download_bytes: outcome.initial_download_bytes as u64,
        accuracy_curve: rounds.iter().map(|m| m.global_accuracy).collect(),
        config: config.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline_final: f64,
    pub candidate_final: f64,
    pub accuracy_delta: f64,
    pub upload_bytes_delta: i64,
    pub download_bytes_delta: i64,
    pub ratio_delta: Option<f64>,
    pub regression: bool,
}

/// Refuses to compare runs that differ in seed, budget or data.
pub fn compare(base: &Summary, cand: &Summary, tolerance: f64) -> Result<Comparison> {
    let (a, b) = (&base.config, &cand.config);
    if a.seed != b.seed {
        bail!("seeds differ ({} vs {})", a.seed, b.seed);
    }
    if a.rounds != b.rounds {
        bail!("round budgets differ ({} vs {})", a.rounds, b.rounds);
    }
    if a.dataset != b.dataset || a.n_clients != b.n_clients || a.dirichlet != b.dirichlet || a.train_fraction != b.train_fraction {
        bail!("runs use different data (dataset, clients or partition)");
    }
    let (Some(bf), Some(cf)) = (base.final_accuracy, cand.final_accuracy) else {
        bail!("both runs need at least one round");
    };
    let accuracy_delta = cf - bf;
    Ok(Comparison {
        baseline_final: bf,
        candidate_final: cf,
        accuracy_delta,
        upload_bytes_delta: cand.upload_bytes as i64 - base.upload_bytes as i64,
        download_bytes_delta: cand.download_bytes as i64 - base.download_bytes as i64,
        ratio_delta: base
            .mean_transmission_ratio
            .zip(cand.mean_transmission_ratio)
            .map(|(x, y)| y - x),
        regression: accuracy_delta < -tolerance,
    })
}
