//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Absent keys keep their defaults;
//! unknown or repeated keys and out-of-range values are errors that name the
//! key (and the line, when read from a file).

use crate::env::{AnyEnv, EnvError, FetchChain, OneStep};
use crate::hae::Whiten;
use crate::trainer::PpoConfig;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "gamma",
    "lambda_low",
    "lambda_high",
    "lambda_flat",
    "whiten",
    "clip_eps",
    "c_v",
    "kl_beta",
    "c_keep",
    "lr_actor",
    "lr_critic",
    "epochs",
    "minibatch",
    "iterations",
    "episodes_per_iter",
    "eval_episodes",
    "n_options",
    "seed",
    "init_scale",
    "stop_success",
    "checkpoint_every",
    "env",
    "env.L",
    "env.H",
    "env.timed",
    "env.rewards",
];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("{0}")]
    Env(#[from] EnvError),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl ConfigError {
    /// The key the error is about, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. }
            | ConfigError::Duplicate { key, .. }
            | ConfigError::Value { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    FetchChain,
    OneStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub length: usize,
    pub horizon: usize,
    pub timed: bool,
    /// Per-action rewards of the one-step environment.
    pub rewards: Vec<f64>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self { kind: EnvKind::FetchChain, length: 5, horizon: 20, timed: false, rewards: vec![0.0, 10.0] }
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<AnyEnv, EnvError> {
        Ok(match self.kind {
            EnvKind::FetchChain if self.timed => AnyEnv::FetchChain(FetchChain::timed(self.length, self.horizon)?),
            EnvKind::FetchChain => AnyEnv::FetchChain(FetchChain::new(self.length, self.horizon)?),
            EnvKind::OneStep => AnyEnv::OneStep(OneStep::with_rewards(self.rewards.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ppo: PpoConfig,
    pub env: EnvSpec,
    /// Write checkpoints every N iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { ppo: PpoConfig::default(), env: EnvSpec::default(), checkpoint_every: 50 }
    }
}

fn value_err(line: usize, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value { line, key: key.to_string(), message: message.into() }
}

fn real(line: usize, key: &str, raw: &str) -> Result<f64, ConfigError> {
    let v: f64 = raw.parse().map_err(|_| value_err(line, key, format!("not a number: {raw:?}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(value_err(line, key, "must be finite"))
    }
}

fn in_range(line: usize, key: &str, raw: &str, lo: f64, hi: f64, lo_open: bool, label: &str) -> Result<f64, ConfigError> {
    let v = real(line, key, raw)?;
    let ok = (if lo_open { v > lo } else { v >= lo }) && v <= hi;
    if ok {
        Ok(v)
    } else {
        Err(value_err(line, key, format!("{v} is outside {label}")))
    }
}

fn count(line: usize, key: &str, raw: &str, min: usize) -> Result<usize, ConfigError> {
    let v: usize = raw
        .parse()
        .map_err(|_| value_err(line, key, format!("not a non-negative integer: {raw:?}")))?;
    if v < min {
        return Err(value_err(line, key, format!("{v} is below the minimum {min}")));
    }
    Ok(v)
}

fn flag(line: usize, key: &str, raw: &str) -> Result<bool, ConfigError> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(value_err(line, key, format!("not a boolean: {raw:?}"))),
    }
}

impl RunConfig {
    /// Sets one key; `line` is only used in error messages (0 for overrides).
    pub fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<(), ConfigError> {
        let raw = raw.trim();
        let unit = |v| in_range(line, key, v, 0.0, 1.0, false, "[0, 1]");
        let non_neg = |v| in_range(line, key, v, 0.0, f64::MAX, false, "[0, inf)");
        let ppo = &mut self.ppo;
        match key {
            "gamma" => ppo.gae.gamma = in_range(line, key, raw, 0.0, 1.0, true, "(0, 1]")?,
            "lambda_low" => ppo.gae.lambda_low = unit(raw)?,
            "lambda_high" => ppo.gae.lambda_high = unit(raw)?,
            "lambda_flat" => ppo.gae.lambda_flat = unit(raw)?,
            "whiten" => {
                ppo.gae.whiten = match raw {
                    "off" => Whiten::Off,
                    "per_level" => Whiten::PerLevel,
                    _ => return Err(value_err(line, key, "expected `off` or `per_level`")),
                }
            }
            "clip_eps" => ppo.clip_eps = in_range(line, key, raw, 0.0, 1.0, true, "(0, 1]")?,
            "c_v" => ppo.c_v = non_neg(raw)?,
            "kl_beta" => ppo.kl_beta = non_neg(raw)?,
            "c_keep" => ppo.c_keep = non_neg(raw)?,
            "lr_actor" => ppo.lr_actor = non_neg(raw)?,
            "lr_critic" => ppo.lr_critic = non_neg(raw)?,
            "init_scale" => ppo.init_scale = non_neg(raw)?,
            "epochs" => ppo.epochs = count(line, key, raw, 0)?,
            "minibatch" => ppo.minibatch = count(line, key, raw, 1)?,
            "iterations" => ppo.iterations = count(line, key, raw, 0)?,
            "episodes_per_iter" => ppo.episodes_per_iter = count(line, key, raw, 1)?,
            "eval_episodes" => ppo.eval_episodes = count(line, key, raw, 0)?,
            "n_options" => ppo.n_options = count(line, key, raw, 1)?,
            "seed" => {
                ppo.seed = raw.parse().map_err(|_| value_err(line, key, format!("not a u64: {raw:?}")))?
            }
            "stop_success" => {
                ppo.stop_success = if raw == "none" { None } else { Some(unit(raw)?) };
            }
            "checkpoint_every" => self.checkpoint_every = count(line, key, raw, 0)?,
            "env" => {
                self.env.kind = match raw {
                    "fetchchain" => EnvKind::FetchChain,
                    "onestep" => EnvKind::OneStep,
                    _ => return Err(value_err(line, key, "expected `fetchchain` or `onestep`")),
                }
            }
            "env.L" => self.env.length = count(line, key, raw, 2)?,
            "env.H" => self.env.horizon = count(line, key, raw, 1)?,
            "env.timed" => self.env.timed = flag(line, key, raw)?,
            "env.rewards" => {
                let rewards = raw
                    .split(',')
                    .map(|r| real(line, key, r.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                if rewards.is_empty() {
                    return Err(value_err(line, key, "needs at least one reward"));
                }
                self.env.rewards = rewards;
            }
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }

    pub fn env(&self) -> Result<AnyEnv, ConfigError> {
        Ok(self.env.build()?)
    }

    /// Renders every key with its current value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let p = &self.ppo;
        let whiten = match p.gae.whiten {
            Whiten::Off => "off",
            Whiten::PerLevel => "per_level",
        };
        let env = match self.env.kind {
            EnvKind::FetchChain => "fetchchain",
            EnvKind::OneStep => "onestep",
        };
        let rewards: Vec<String> = self.env.rewards.iter().map(|r| format!("{r:?}")).collect();
        let stop = p.stop_success.map_or("none".to_string(), |s| format!("{s:?}"));
        let values: Vec<String> = vec![
            format!("{:?}", p.gae.gamma),
            format!("{:?}", p.gae.lambda_low),
            format!("{:?}", p.gae.lambda_high),
            format!("{:?}", p.gae.lambda_flat),
            whiten.into(),
            format!("{:?}", p.clip_eps),
            format!("{:?}", p.c_v),
            format!("{:?}", p.kl_beta),
            format!("{:?}", p.c_keep),
            format!("{:?}", p.lr_actor),
            format!("{:?}", p.lr_critic),
            p.epochs.to_string(),
            p.minibatch.to_string(),
            p.iterations.to_string(),
            p.episodes_per_iter.to_string(),
            p.eval_episodes.to_string(),
            p.n_options.to_string(),
            p.seed.to_string(),
            format!("{:?}", p.init_scale),
            stop,
            self.checkpoint_every.to_string(),
            env.into(),
            self.env.length.to_string(),
            self.env.horizon.to_string(),
            self.env.timed.to_string(),
            rewards.join(","),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate { line, key: key.to_string() });
        }
        cfg.set(key, value, line)?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.ppo.gae.lambda_low, 0.95);
        assert_eq!(cfg.ppo.gae.lambda_high, 0.95);
        assert_eq!(cfg.ppo.kl_beta, 0.01);
        assert_eq!(cfg.ppo.c_keep, 0.3);
    }

    #[test]
    fn range_errors_name_the_key() {
        let err = parse_config("seed = 1\ngamma = 1.5\n").unwrap_err();
        assert_eq!(err.key(), Some("gamma"));
        assert!(matches!(err, ConfigError::Value { line: 2, .. }));
        assert!(err.to_string().contains("gamma"));
        assert_eq!(parse_config("gamma = 0").unwrap_err().key(), Some("gamma"));
        assert_eq!(parse_config("env.L = 1").unwrap_err().key(), Some("env.L"));
        assert_eq!(parse_config("minibatch = 0").unwrap_err().key(), Some("minibatch"));
    }

    #[test]
    fn boundary_and_syntax() {
        let cfg = parse_config("lambda_low = 1.0\ngamma = 1\n").unwrap();
        assert_eq!(cfg.ppo.gae.lambda_low, 1.0);
        assert_eq!(parse_config("a\n"), Err(ConfigError::Syntax { line: 1 }));
        assert_eq!(
            parse_config("\nlr = 3\n"),
            Err(ConfigError::UnknownKey { line: 2, key: "lr".into() })
        );
        assert!(matches!(parse_config("seed=1\nseed=2"), Err(ConfigError::Duplicate { line: 2, .. })));
    }

    #[test]
    fn every_key_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.ppo.stop_success = Some(0.9);
        cfg.env = EnvSpec { kind: EnvKind::OneStep, length: 3, horizon: 6, timed: true, rewards: vec![0.0, 10.0, -1.5] };
        cfg.ppo.gae.whiten = Whiten::Off;
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn env_spec_builds() {
        let cfg = parse_config("env.L = 3\nenv.H = 6\nenv.timed = true").unwrap();
        let env = cfg.env().unwrap();
        assert!(matches!(env, AnyEnv::FetchChain(ref f) if f.is_timed() && f.length() == 3));
        let cfg = parse_config("env = onestep\nenv.rewards = 0, 10").unwrap();
        assert!(matches!(cfg.env().unwrap(), AnyEnv::OneStep(_)));
    }
}
