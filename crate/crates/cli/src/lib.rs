//! Argument handling for the `depen` binary.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use depen_core::pipeline::{Command, Method, PipelineError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "depen", version, about = "Detect sensitive tokens and regenerate text under a neutralization constraint")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `dotted.key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory holding every artifact of the run.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Percentage of tokens masked per sentence.
    #[arg(long, global = true)]
    pub k: Option<f64>,
    /// Down-weighting factor for weighted decoding.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    GenCorpus,
    TrainClassifier,
    TrainSeq2seq,
    TrainHeads,
    Detect,
    Rewrite {
        #[arg(long)]
        method: String,
    },
    Evaluate,
    Report,
}

impl Cmd {
    pub fn command(&self) -> Result<Command, PipelineError> {
        Ok(match self {
            Cmd::GenCorpus => Command::GenCorpus,
            Cmd::TrainClassifier => Command::TrainClassifier,
            Cmd::TrainSeq2seq => Command::TrainSeq2Seq,
            Cmd::TrainHeads => Command::TrainHeads,
            Cmd::Detect => Command::Detect,
            Cmd::Rewrite { method } => Command::Rewrite(method.parse::<Method>()?),
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Report => Command::Report,
        })
    }
}

/// Defaults, then the config file, then `--set` overrides, then the dedicated flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config { key: "--config".into(), reason: format!("{}: {e}", path.display()) })?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::Config { key: "--set".into(), reason: format!("expected KEY=VALUE, got {kv:?}") })?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(k) = common.k {
        cfg.detect_k = k;
    }
    if let Some(a) = common.alpha {
        cfg.wd_alpha = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses, runs and maps the outcome to a process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let result = cli.command.command().and_then(|cmd| {
        let cfg = resolve_config(&cli.common)?;
        depen_core::pipeline::run(cmd, &cfg)
    });
    match result {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("depen").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_set_which_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "detect.k = 30\nwd.alpha = 0.5\nseed = 3\n").unwrap();
        let f = file.to_str().unwrap();
        let cli = parse(&["detect", "--config", f, "--set", "detect.k=25", "--alpha", "0.3"]);
        let cfg = resolve_config(&cli.common).unwrap();
        assert_eq!((cfg.detect_k, cfg.wd_alpha, cfg.seed), (25.0, 0.3, 3));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let cli = parse(&["evaluate", "--set", "perturb.fusion_weight=3"]);
        assert_eq!(resolve_config(&cli.common).unwrap_err().exit_code(), 2);
        let cli = parse(&["rewrite", "--method", "patr"]);
        assert_eq!(cli.command.command().unwrap_err().exit_code(), 2);
    }
}
