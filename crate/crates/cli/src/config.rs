use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ceperfed::{ExperimentConfig, Mode};

use crate::RunArgs;

/// An experiment config file: every `ExperimentConfig` field at top level,
/// plus an optional `out_dir`.
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub out_dir: Option<PathBuf>,
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    let Some(map) = value.as_object_mut() else {
        bail!("top level must be a JSON object");
    };
    let out_dir = match map.remove("out_dir") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => bail!("out_dir must be a string, got {other}"),
    };
    let experiment: ExperimentConfig = serde_json::from_value(value).map_err(|e| {
        anyhow::anyhow!("{e} (allowed top-level keys: out_dir, {})", EXPERIMENT_KEYS.join(", "))
    })?;
    Ok(RunConfig { experiment, out_dir })
}

const EXPERIMENT_KEYS: &[&str] = &[
    "n_clients",
    "local_epochs",
    "batch_size",
    "learning_rate",
    "rounds",
    "patience",
    "mode",
    "energy",
    "collab",
    "model",
    "dataset",
    "dirichlet",
    "train_fraction",
    "seed",
    "threads",
];

/// Applies command-line overrides and returns one config per run
/// (several when sweeping fixed ranks).
pub fn resolve(mut base: ExperimentConfig, args: &RunArgs, threads_env: Option<&str>) -> Result<Vec<ExperimentConfig>> {
    if let Some(r) = args.rounds {
        base.rounds = r;
    }
    if let Some(s) = args.seed {
        base.seed = s;
    }
    if let Some(e) = args.eta {
        base.energy.eta = e;
    }
    if let Some(g) = args.gamma {
        base.energy.gamma = g;
    }
    if let Some(c) = args.clients {
        base.n_clients = c;
    }
    if let Some(d) = args.dirichlet {
        base.dirichlet = d;
    }
    if let Some(t) = threads_env.filter(|t| !t.trim().is_empty()) {
        let n: usize = t
            .trim()
            .parse()
            .with_context(|| format!("CEPFED_THREADS must be a positive integer, got {t:?}"))?;
        if n == 0 {
            bail!("CEPFED_THREADS must be a positive integer, got 0");
        }
        base.threads = Some(base.threads.map_or(n, |c| c.min(n)));
    }

    let modes: Vec<Mode> = match (args.mode.as_deref(), args.rank.as_slice()) {
        (Some("fixed_rank"), []) => bail!("--mode fixed_rank needs --rank"),
        (Some("fixed_rank"), ranks) => ranks.iter().map(|&r| Mode::FixedRank(r)).collect(),
        (Some(_), [_, ..]) => bail!("--rank only applies to --mode fixed_rank"),
        (None, ranks @ [_, ..]) => ranks.iter().map(|&r| Mode::FixedRank(r)).collect(),
        (Some(name), []) => vec![parse_mode(name)?],
        (None, []) => vec![base.mode],
    };
    modes
        .into_iter()
        .map(|mode| {
            let cfg = ExperimentConfig { mode, ..base.clone() };
            cfg.validate().with_context(|| format!("invalid {} configuration", mode.label()))?;
            Ok(cfg)
        })
        .collect()
}

fn parse_mode(name: &str) -> Result<Mode> {
    Ok(match name {
        "ceperfed" => Mode::Ceperfed,
        "fedavg" => Mode::Fedavg,
        "no_alpha" => Mode::NoAlpha,
        "no_hsvd" => Mode::NoHsvd,
        other => bail!("unknown mode {other:?}; expected ceperfed, fedavg, fixed_rank, no_alpha or no_hsvd"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse(r#"{"rounds": 3, "learning_rat": 0.1}"#).err().unwrap();
        let msg = format!("{err:#}");
        assert!(msg.contains("learning_rat"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(parse(r#"{"dataset": {"nosie_std": 1}}"#).is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = parse(r#"{"rounds": 3, "mode": {"fixed_rank": 4}, "out_dir": "x"}"#).unwrap();
        assert_eq!(cfg.experiment.rounds, 3);
        assert_eq!(cfg.experiment.mode, Mode::FixedRank(4));
        assert_eq!(cfg.experiment.batch_size, ExperimentConfig::default().batch_size);
        assert_eq!(cfg.out_dir, Some(PathBuf::from("x")));
    }
}
