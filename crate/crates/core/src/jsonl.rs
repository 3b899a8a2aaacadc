//! JSON-Lines I/O for trajectories and per-turn advantages.
//!
//! Trajectories are written one object per turn:
//!
//! ```text
//! {"t":0,"state":3,"prev_subgoal":null,"q":1,"subgoal":0,"subgoal_text":null,"action":2,"reward":0.0,"raw_reward":0.0,"done":false}
//! ```
//!
//! An episode is a contiguous run of turns starting at `t = 0` and ending
//! either with `"done":true` or with a sentinel line
//! `{"truncated":true,"final_state":N}` carrying the bootstrap state `s_T`.
//! Optional per-turn keys: `behavior` (sampling log-probabilities and switch
//! probability), `format_valid` (written only when false).

use crate::episode::{
    ActionId, BehaviorRecord, EpisodeEnd, EpisodeError, State, SubgoalId, Switch, Trajectory,
    TurnRecord,
};
use crate::hae::HierarchicalAdvantages;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
    #[error("episode ending at line {line}: {source}")]
    Episode { line: usize, source: EpisodeError },
    #[error("input ends inside an episode (no done turn or truncation line)")]
    Unterminated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct BehaviorLine {
    switch_logp: Option<f64>,
    subgoal_logp: Option<f64>,
    action_logp: f64,
    beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TurnLine {
    t: usize,
    state: usize,
    prev_subgoal: Option<usize>,
    q: u8,
    subgoal: usize,
    subgoal_text: Option<String>,
    action: usize,
    reward: f64,
    raw_reward: f64,
    done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    behavior: Option<BehaviorLine>,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    format_valid: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TruncationLine {
    truncated: bool,
    final_state: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyLine {
    Truncation(TruncationLine),
    Turn(TurnLine),
}

impl From<&TurnRecord> for TurnLine {
    fn from(turn: &TurnRecord) -> Self {
        Self {
            t: turn.t,
            state: turn.state.0,
            prev_subgoal: turn.prev_subgoal.map(|o| o.0),
            q: turn.switch.q(),
            subgoal: turn.subgoal.0,
            subgoal_text: turn.subgoal_text.clone(),
            action: turn.action.0,
            reward: turn.reward,
            raw_reward: turn.raw_reward,
            done: turn.done,
            behavior: turn.behavior.map(|b| BehaviorLine {
                switch_logp: b.switch_logp,
                subgoal_logp: b.subgoal_logp,
                action_logp: b.action_logp,
                beta: b.beta,
            }),
            format_valid: turn.format_valid,
        }
    }
}

impl TurnLine {
    fn into_record(self, line: usize) -> Result<TurnRecord, JsonlError> {
        let switch = Switch::from_q(self.q).ok_or_else(|| JsonlError::Structure {
            line,
            message: format!("q must be 0 or 1, got {}", self.q),
        })?;
        Ok(TurnRecord {
            t: self.t,
            state: State(self.state),
            prev_subgoal: self.prev_subgoal.map(SubgoalId),
            switch,
            subgoal: SubgoalId(self.subgoal),
            subgoal_text: self.subgoal_text,
            action: ActionId(self.action),
            reward: self.reward,
            raw_reward: self.raw_reward,
            done: self.done,
            behavior: self.behavior.map(|b| BehaviorRecord {
                switch_logp: b.switch_logp,
                subgoal_logp: b.subgoal_logp,
                action_logp: b.action_logp,
                beta: b.beta,
            }),
            format_valid: self.format_valid,
        })
    }
}

pub fn write_trajectory<W: Write>(out: &mut W, traj: &Trajectory) -> Result<(), JsonlError> {
    for turn in &traj.turns {
        serde_json::to_writer(&mut *out, &TurnLine::from(turn))
            .map_err(|source| JsonlError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    if let EpisodeEnd::Truncated { final_state } = traj.end {
        let line = TruncationLine { truncated: true, final_state: final_state.0 };
        serde_json::to_writer(&mut *out, &line).map_err(|source| JsonlError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trajectories<W: Write>(out: &mut W, batch: &[Trajectory]) -> Result<(), JsonlError> {
    batch.iter().try_for_each(|traj| write_trajectory(out, traj))
}

/// Reads every episode; each one is checked with [`Trajectory::validate`].
/// Blank lines are ignored.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>, JsonlError> {
    let mut episodes = Vec::new();
    let mut turns: Vec<TurnRecord> = Vec::new();

    let mut finish = |turns: &mut Vec<TurnRecord>, end: EpisodeEnd, line: usize| {
        let traj = Trajectory { turns: std::mem::take(turns), end, seed: episodes.len() as u64 };
        traj.validate().map_err(|source| JsonlError::Episode { line, source })?;
        episodes.push(traj);
        Ok::<(), JsonlError>(())
    };

    for (i, text) in input.lines().enumerate() {
        let line = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: AnyLine =
            serde_json::from_str(&text).map_err(|source| JsonlError::Json { line, source })?;
        match parsed {
            AnyLine::Truncation(TruncationLine { truncated, final_state }) => {
                if !truncated || turns.is_empty() {
                    return Err(JsonlError::Structure {
                        line,
                        message: "truncation line must follow a turn and carry \"truncated\":true".into(),
                    });
                }
                finish(&mut turns, EpisodeEnd::Truncated { final_state: State(final_state) }, line)?;
            }
            AnyLine::Turn(turn) => {
                if turn.t != turns.len() {
                    return Err(JsonlError::Structure {
                        line,
                        message: format!("expected turn index {}, found {}", turns.len(), turn.t),
                    });
                }
                let record = turn.into_record(line)?;
                let done = record.done;
                turns.push(record);
                if done {
                    finish(&mut turns, EpisodeEnd::Terminal, line)?;
                }
            }
        }
    }
    if !turns.is_empty() {
        return Err(JsonlError::Unterminated);
    }
    Ok(episodes)
}

/// One per-turn advantage record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageLine {
    /// Index of the episode in the input file.
    pub episode: usize,
    pub t: usize,
    #[serde(rename = "A_low")]
    pub low: f64,
    #[serde(rename = "A_switch")]
    pub switch: Option<f64>,
    #[serde(rename = "A_high")]
    pub high: Option<f64>,
    #[serde(rename = "A_flat")]
    pub flat: Option<f64>,
}

pub fn advantage_lines(episode: usize, adv: &HierarchicalAdvantages) -> Vec<AdvantageLine> {
    (0..adv.low.len())
        .map(|t| AdvantageLine {
            episode,
            t,
            low: adv.low[t],
            switch: adv.switch[t],
            high: adv.high_at_turn(t),
            flat: adv.flat.as_ref().map(|f| f[t]),
        })
        .collect()
}

pub fn write_advantages<W: Write>(out: &mut W, advs: &[HierarchicalAdvantages]) -> Result<(), JsonlError> {
    for (episode, adv) in advs.iter().enumerate() {
        for line in advantage_lines(episode, adv) {
            serde_json::to_writer(&mut *out, &line).map_err(|source| JsonlError::Json { line: 0, source })?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Trajectory> {
        let mut a0 = TurnRecord::new(0, State(2), None, Switch::Switch, SubgoalId(1), ActionId(0), -0.1);
        a0.subgoal_text = Some("fetch \"it\"".into());
        a0.behavior = Some(BehaviorRecord {
            switch_logp: None,
            subgoal_logp: Some(-0.7),
            action_logp: -1.25,
            beta: None,
        });
        let mut a1 = TurnRecord::new(1, State(3), Some(SubgoalId(1)), Switch::Keep, SubgoalId(1), ActionId(3), 9.7);
        a1.raw_reward = 10.0;
        a1.format_valid = false;
        a1.done = true;
        let b0 = TurnRecord::new(0, State(0), None, Switch::Switch, SubgoalId(0), ActionId(1), 0.1 + 0.2);
        vec![
            Trajectory { turns: vec![a0, a1], end: EpisodeEnd::Terminal, seed: 0 },
            Trajectory { turns: vec![b0], end: EpisodeEnd::Truncated { final_state: State(5) }, seed: 1 },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let batch = sample();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &batch).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().contains("\"truncated\":true"));
        assert!(!text.lines().next().unwrap().contains("format_valid"));
        let back = read_trajectories(buf.as_slice()).unwrap();
        assert_eq!(back, batch);
    }

    #[test]
    fn structural_errors_carry_lines() {
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();

        let unterminated = lines[..1].join("\n");
        assert!(matches!(read_trajectories(unterminated.as_bytes()), Err(JsonlError::Unterminated)));

        let skipped = [lines[1]].join("\n");
        assert!(matches!(read_trajectories(skipped.as_bytes()), Err(JsonlError::Structure { line: 1, .. })));

        let garbage = format!("{}\n{{\"t\":", lines[0]);
        assert!(matches!(read_trajectories(garbage.as_bytes()), Err(JsonlError::Json { line: 2, .. })));

        let keep_first = lines[2].replace("\"q\":1", "\"q\":0");
        let input = format!("{keep_first}\n{}", lines[3]);
        assert!(matches!(
            read_trajectories(input.as_bytes()),
            Err(JsonlError::Episode { line: 2, source: EpisodeError::FirstTurnKeeps })
        ));
    }

    #[test]
    fn advantage_records() {
        let adv = HierarchicalAdvantages {
            boundaries: vec![0, 2, 3],
            low: vec![0.5, -0.5, 1.0],
            high: vec![2.0, 3.0],
            switch: vec![None, Some(0.25), Some(-1.0)],
            flat: None,
        };
        let mut buf = Vec::new();
        write_advantages(&mut buf, &[adv]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<AdvantageLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].high, Some(2.0));
        assert_eq!(rows[1].high, None);
        assert_eq!(rows[2].high, Some(3.0));
        assert_eq!(rows[0].switch, None);
        assert!(text.starts_with("{\"episode\":0,\"t\":0,\"A_low\":0.5,\"A_switch\":null,\"A_high\":2.0,\"A_flat\":null}"));
    }
}
