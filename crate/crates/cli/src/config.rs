//! Fit settings for `decompose`: command-line flags over an optional TOML file over defaults.

use std::path::Path;

use clap::Args;
use partsplit::{FitConfig, StepRule};
use serde::Deserialize;

use crate::CliError;

/// Fit settings that may come from flags or from the config file.
#[derive(Args, Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeOverrides {
    #[arg(long)]
    pub rank_appearance: Option<usize>,
    #[arg(long)]
    pub rank_parts: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Samples per stochastic iteration (default: full batch)
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Project the parts onto P >= 0 after each step
    #[arg(long)]
    pub nonneg: Option<bool>,
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    /// `backtracking` or `fixed`
    #[arg(long)]
    pub step_rule: Option<StepRule>,
    /// Rescale the fitted pair so that ||A||_F^2 = R_C
    #[arg(long)]
    pub balance_scale: Option<bool>,
}

impl DecomposeOverrides {
    /// Fields set in `self` win over those in `base`.
    pub fn over(self, base: DecomposeOverrides) -> DecomposeOverrides {
        DecomposeOverrides {
            rank_appearance: self.rank_appearance.or(base.rank_appearance),
            rank_parts: self.rank_parts.or(base.rank_parts),
            iterations: self.iterations.or(base.iterations),
            learning_rate: self.learning_rate.or(base.learning_rate),
            minibatch: self.minibatch.or(base.minibatch),
            seed: self.seed.or(base.seed),
            nonneg: self.nonneg.or(base.nonneg),
            convergence_tol: self.convergence_tol.or(base.convergence_tol),
            step_rule: self.step_rule.or(base.step_rule),
            balance_scale: self.balance_scale.or(base.balance_scale),
        }
    }

    pub fn into_config(self) -> Result<FitConfig, CliError> {
        let rc = self
            .rank_appearance
            .ok_or_else(|| CliError::usage("rank_appearance is required (flag or config file)"))?;
        let rs = self
            .rank_parts
            .ok_or_else(|| CliError::usage("rank_parts is required (flag or config file)"))?;
        let mut cfg = FitConfig::new(rc, rs);
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        cfg.minibatch = self.minibatch.or(cfg.minibatch);
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.nonneg {
            cfg.nonneg = v;
        }
        if let Some(v) = self.convergence_tol {
            cfg.convergence_tol = v;
        }
        if let Some(v) = self.step_rule {
            cfg.step_rule = v;
        }
        if let Some(v) = self.balance_scale {
            cfg.balance_scale = v;
        }
        Ok(cfg)
    }
}

pub fn read_file(path: &Path) -> Result<DecomposeOverrides, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let msg = e.to_string().replace('\n', " ");
        CliError::usage(format!("config {}: {}", path.display(), msg.trim()))
    })
}

/// Resolves the final fit configuration: flags > file > defaults.
pub fn resolve(flags: &DecomposeOverrides, file: Option<&Path>) -> Result<FitConfig, CliError> {
    let base = match file {
        Some(p) => read_file(p)?,
        None => DecomposeOverrides::default(),
    };
    flags.clone().over(base).into_config()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: DecomposeOverrides = toml::from_str(
            "rank_appearance = 3\nrank_parts = 2\niterations = 50\nseed = 7\nstep_rule = \"fixed\"\n",
        )
        .unwrap();
        let flags = DecomposeOverrides {
            iterations: Some(10),
            ..Default::default()
        };
        let cfg = flags.over(file).into_config().unwrap();
        assert_eq!((cfg.rank_appearance, cfg.rank_parts), (3, 2));
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.step_rule, StepRule::Fixed);
        assert_eq!(cfg.learning_rate, FitConfig::new(3, 2).learning_rate);
    }

    #[test]
    fn unknown_keys_and_missing_ranks_are_rejected() {
        assert!(toml::from_str::<DecomposeOverrides>("rank = 3\n").is_err());
        assert!(DecomposeOverrides::default().into_config().is_err());
    }
}
