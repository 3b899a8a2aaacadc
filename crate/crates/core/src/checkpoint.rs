//! Plain-text table checkpoints.
//!
//! ```text
//! format policy-v1
//! dims <S> <O> <A>
//! switch           # S*O rows of 2 values: [s][o_prev][KEEP, SWITCH]
//! subgoal          # S rows of O values
//! action           # S*O rows of A values
//! ```
//!
//! `format critic-v1` has `dims <S> <O>` and sections `high` (one row of S
//! values) and `low` (S rows of O values); `format flat-critic-v1` has
//! `dims <S>` and a single `values` row. Numbers use Rust's shortest
//! round-trip formatting, so save/load is exact. `#` starts a comment.

use crate::critic::{FlatValues, ValueTables};
use crate::policy::{Dims, PolicyParams};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const POLICY_FORMAT: &str = "policy-v1";
pub const CRITIC_FORMAT: &str = "critic-v1";
pub const FLAT_CRITIC_FORMAT: &str = "flat-critic-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("expected format {expected}, found {found}")]
    Format { expected: &'static str, found: String },
    #[error("section {section}: expected {expected} values, found {found}")]
    Size { section: String, expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn push_rows(out: &mut String, name: &str, values: &[f64], width: usize) {
    out.push_str(name);
    out.push('\n');
    for row in values.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

pub fn policy_to_string(params: &PolicyParams) -> String {
    let d = params.dims;
    let mut out = String::new();
    let _ = writeln!(out, "format {POLICY_FORMAT}\ndims {} {} {}", d.states, d.options, d.actions);
    push_rows(&mut out, "switch", &params.switch, 2);
    push_rows(&mut out, "subgoal", &params.subgoal, d.options);
    push_rows(&mut out, "action", &params.action, d.actions);
    out
}

pub fn critic_to_string(tables: &ValueTables) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format {CRITIC_FORMAT}\ndims {} {}", tables.states, tables.options);
    push_rows(&mut out, "high", &tables.high, tables.states);
    push_rows(&mut out, "low", &tables.low, tables.options);
    out
}

pub fn flat_critic_to_string(values: &FlatValues) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format {FLAT_CRITIC_FORMAT}\ndims {}", values.values.len());
    push_rows(&mut out, "values", &values.values, values.values.len());
    out
}

/// Header plus named sections of numbers, in file order.
struct Parsed {
    format: String,
    dims: Vec<usize>,
    sections: Vec<(String, Vec<f64>)>,
}

fn parse(text: &str) -> Result<Parsed, CheckpointError> {
    let mut format = None;
    let mut dims = None;
    let mut sections: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let syntax = |message: String| CheckpointError::Syntax { line, message };
        let mut words = content.split_whitespace();
        let first = words.next().unwrap_or_default();
        if format.is_none() {
            if first != "format" {
                return Err(syntax("expected `format <name>` header".into()));
            }
            format = Some(words.next().ok_or_else(|| syntax("missing format name".into()))?.to_string());
        } else if dims.is_none() {
            if first != "dims" {
                return Err(syntax("expected `dims` line".into()));
            }
            dims = Some(
                words
                    .map(|w| w.parse::<usize>().map_err(|_| syntax(format!("bad dimension {w:?}"))))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        } else if first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) && first != "inf" && first != "NaN" {
            sections.push((first.to_string(), Vec::new()));
        } else {
            let (_, values) = sections.last_mut().ok_or_else(|| syntax("values before any section".into()))?;
            for w in content.split_whitespace() {
                values.push(w.parse().map_err(|_| syntax(format!("bad number {w:?}")))?);
            }
        }
    }
    Ok(Parsed {
        format: format.ok_or(CheckpointError::Syntax { line: 0, message: "empty checkpoint".into() })?,
        dims: dims.ok_or(CheckpointError::Syntax { line: 0, message: "missing dims line".into() })?,
        sections,
    })
}

impl Parsed {
    fn expect_format(&self, expected: &'static str, n_dims: usize) -> Result<(), CheckpointError> {
        if self.format != expected {
            return Err(CheckpointError::Format { expected, found: self.format.clone() });
        }
        if self.dims.len() != n_dims {
            return Err(CheckpointError::Syntax {
                line: 2,
                message: format!("expected {n_dims} dimensions, found {}", self.dims.len()),
            });
        }
        Ok(())
    }

    fn take(&mut self, name: &str, expected: usize) -> Result<Vec<f64>, CheckpointError> {
        let idx = self.sections.iter().position(|(n, _)| n == name).ok_or_else(|| CheckpointError::Size {
            section: name.to_string(),
            expected,
            found: 0,
        })?;
        let (_, values) = self.sections.remove(idx);
        if values.len() != expected {
            return Err(CheckpointError::Size { section: name.to_string(), expected, found: values.len() });
        }
        Ok(values)
    }
}

pub fn policy_from_str(text: &str) -> Result<PolicyParams, CheckpointError> {
    let mut p = parse(text)?;
    p.expect_format(POLICY_FORMAT, 3)?;
    let dims = Dims::new(p.dims[0], p.dims[1], p.dims[2]);
    Ok(PolicyParams {
        dims,
        switch: p.take("switch", dims.switch_len())?,
        subgoal: p.take("subgoal", dims.subgoal_len())?,
        action: p.take("action", dims.action_len())?,
    })
}

pub fn critic_from_str(text: &str) -> Result<ValueTables, CheckpointError> {
    let mut p = parse(text)?;
    p.expect_format(CRITIC_FORMAT, 2)?;
    let (states, options) = (p.dims[0], p.dims[1]);
    Ok(ValueTables { states, options, high: p.take("high", states)?, low: p.take("low", states * options)? })
}

pub fn flat_critic_from_str(text: &str) -> Result<FlatValues, CheckpointError> {
    let mut p = parse(text)?;
    p.expect_format(FLAT_CRITIC_FORMAT, 1)?;
    let states = p.dims[0];
    Ok(FlatValues { values: p.take("values", states)? })
}

pub fn save_policy(path: &Path, params: &PolicyParams) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, policy_to_string(params))?)
}

pub fn load_policy(path: &Path) -> Result<PolicyParams, CheckpointError> {
    policy_from_str(&std::fs::read_to_string(path)?)
}

pub fn save_critic(path: &Path, tables: &ValueTables) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, critic_to_string(tables))?)
}

pub fn load_critic(path: &Path) -> Result<ValueTables, CheckpointError> {
    critic_from_str(&std::fs::read_to_string(path)?)
}

pub fn save_flat_critic(path: &Path, values: &FlatValues) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, flat_critic_to_string(values))?)
}

pub fn load_flat_critic(path: &Path) -> Result<FlatValues, CheckpointError> {
    flat_critic_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PolicyParams::random(Dims::new(5, 3, 4), 2.0, &mut rng);
        let text = policy_to_string(&params);
        assert!(text.starts_with("format policy-v1\ndims 5 3 4\nswitch\n"));
        assert_eq!(policy_from_str(&text).unwrap(), params);
    }

    #[test]
    fn critic_round_trips() {
        let mut tables = ValueTables::zeros(3, 2);
        tables.high = vec![1.0, -2.5, 1e-300];
        tables.low = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(critic_from_str(&critic_to_string(&tables)).unwrap(), tables);
        let flat = FlatValues { values: vec![3.25, -0.0, 7.0] };
        assert_eq!(flat_critic_from_str(&flat_critic_to_string(&flat)).unwrap(), flat);
    }

    #[test]
    fn comments_and_errors() {
        let text = "# saved by hand\nformat flat-critic-v1\ndims 2\nvalues # state order\n1 2\n";
        assert_eq!(flat_critic_from_str(text).unwrap().values, vec![1.0, 2.0]);
        assert!(matches!(critic_from_str(text), Err(CheckpointError::Format { .. })));
        assert!(matches!(
            flat_critic_from_str("format flat-critic-v1\ndims 3\nvalues\n1 2\n"),
            Err(CheckpointError::Size { expected: 3, found: 2, .. })
        ));
        assert!(matches!(
            flat_critic_from_str("format flat-critic-v1\ndims 2\nvalues\n1 x\n"),
            Err(CheckpointError::Syntax { line: 4, .. })
        ));
    }
}
