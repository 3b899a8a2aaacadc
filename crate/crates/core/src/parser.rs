//! Three-block agent output (`<switch>`, `<subgoal>`, `<action>`) and offline
//! ingestion of logged transcripts into [`Trajectory`] values.
//!
//! Rules:
//! - tags are case-sensitive and only the first occurrence of each block counts;
//! - block contents are trimmed; subgoal equality is exact after trimming;
//! - a record with no recoverable action block is a hard failure, every other
//!   defect yields a best-effort decision and a penalised verdict.

use crate::episode::{ActionId, EpisodeEnd, State, SubgoalId, Switch, Trajectory, TurnRecord};
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

/// Penalty subtracted from the reward of a malformed turn.
pub const FORMAT_PENALTY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Switch,
    Subgoal,
    Action,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Switch, BlockKind::Subgoal, BlockKind::Action];

    pub fn tag(self) -> &'static str {
        match self {
            BlockKind::Switch => "switch",
            BlockKind::Subgoal => "subgoal",
            BlockKind::Action => "action",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingBlock(BlockKind),
    WrongOrder,
    InvalidSwitchValue(String),
    /// KEEP whose subgoal differs from the previous one (or KEEP on the first turn).
    KeepWithAlteredSubgoal,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingBlock(kind) => write!(f, "missing <{kind}> block"),
            Violation::WrongOrder => f.write_str("blocks out of order"),
            Violation::InvalidSwitchValue(v) => write!(f, "switch value {v:?} is not KEEP or SWITCH"),
            Violation::KeepWithAlteredSubgoal => f.write_str("KEEP with an altered subgoal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDecision {
    pub q: Switch,
    pub subgoal_text: String,
    pub action_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatVerdict {
    pub valid: bool,
    pub violations: Vec<Violation>,
    pub penalty: f64,
}

impl FormatVerdict {
    fn from_violations(violations: Vec<Violation>) -> Self {
        let valid = violations.is_empty();
        Self {
            valid,
            violations,
            penalty: if valid { 0.0 } else { FORMAT_PENALTY },
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no <action> block can be recovered")]
    NoAction,
    #[error("line {line}: no <action> block can be recovered")]
    NoActionAt { line: usize },
    #[error("line {line}: {message}")]
    Metadata { line: usize, message: String },
    #[error("transcript contains no turns")]
    Empty,
    #[error("line {line}: record after a terminal record")]
    AfterDone { line: usize },
}

/// First occurrence of `<tag>...</tag>`: (start of the opening tag, trimmed body).
fn find_block(text: &str, kind: BlockKind) -> Option<(usize, &str)> {
    let open = format!("<{}>", kind.tag());
    let close = format!("</{}>", kind.tag());
    let start = text.find(&open)?;
    let body_start = start + open.len();
    let len = text[body_start..].find(&close)?;
    Some((start, text[body_start..body_start + len].trim()))
}

/// Context-free parse: no KEEP/subgoal consistency check, and a missing or
/// invalid switch value defaults to SWITCH.
pub fn parse_blocks(text: &str) -> Result<(ParsedDecision, FormatVerdict), ParseError> {
    parse_inner(text, None)
}

/// Parse with the previous turn's subgoal text; `None` marks the first turn.
pub fn parse_blocks_in_context(
    text: &str,
    prev_subgoal: Option<&str>,
) -> Result<(ParsedDecision, FormatVerdict), ParseError> {
    parse_inner(text, Some(prev_subgoal))
}

fn parse_inner(
    text: &str,
    context: Option<Option<&str>>,
) -> Result<(ParsedDecision, FormatVerdict), ParseError> {
    let switch = find_block(text, BlockKind::Switch);
    let subgoal = find_block(text, BlockKind::Subgoal);
    let action = find_block(text, BlockKind::Action).ok_or(ParseError::NoAction)?;
    let prev = context.flatten();

    let mut violations = Vec::new();
    for (kind, found) in [(BlockKind::Switch, switch.is_some()), (BlockKind::Subgoal, subgoal.is_some())] {
        if !found {
            violations.push(Violation::MissingBlock(kind));
        }
    }
    let positions: Vec<usize> = [switch.map(|b| b.0), subgoal.map(|b| b.0), Some(action.0)]
        .into_iter()
        .flatten()
        .collect();
    if positions.windows(2).any(|w| w[0] > w[1]) {
        violations.push(Violation::WrongOrder);
    }

    let subgoal_text = match subgoal {
        Some((_, s)) => s.to_string(),
        // Best effort: a missing subgoal carries the previous one over.
        None => prev.unwrap_or_default().to_string(),
    };
    let inferred = if prev == Some(subgoal_text.as_str()) { Switch::Keep } else { Switch::Switch };
    let q = match switch.map(|b| b.1) {
        Some("KEEP") => Switch::Keep,
        Some("SWITCH") => Switch::Switch,
        Some(other) => {
            violations.push(Violation::InvalidSwitchValue(other.to_string()));
            inferred
        }
        None => inferred,
    };
    if let Some(prev) = context {
        if q == Switch::Keep && prev != Some(subgoal_text.as_str()) {
            violations.push(Violation::KeepWithAlteredSubgoal);
        }
    }

    let decision = ParsedDecision { q, subgoal_text, action_text: action.1.to_string() };
    Ok((decision, FormatVerdict::from_violations(violations)))
}

/// Canonical three-block rendering; `parse_blocks(render(d))` returns `d` for
/// trimmed, tag-free fields.
pub fn render(decision: &ParsedDecision) -> String {
    let q = match decision.q {
        Switch::Keep => "KEEP",
        Switch::Switch => "SWITCH",
    };
    format!(
        "<switch>{q}</switch><subgoal>{}</subgoal><action>{}</action>",
        decision.subgoal_text, decision.action_text
    )
}

/// One logged turn before parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTurn {
    pub text: String,
    pub reward: f64,
    pub done: bool,
    /// Explicit state id; defaults to the turn index.
    pub state: Option<usize>,
    /// 1-based line where the record starts, for error messages.
    pub line: usize,
}

impl LogTurn {
    pub fn new(text: impl Into<String>, reward: f64, done: bool) -> Self {
        Self { text: text.into(), reward, done, state: None, line: 0 }
    }
}

/// A parsed transcript file: its turns and an optional truncation state.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub turns: Vec<LogTurn>,
    pub truncated_at: Option<usize>,
}

/// Reads the transcript text format: one record per turn, records separated by
/// blank lines. Inside a record, lines starting with `#` are comments and lines
/// starting with `@` are metadata (`@reward X`, `@done`, `@state N`,
/// `@truncated N`); everything else is agent output.
pub fn read_transcript(text: &str) -> Result<Transcript, ParseError> {
    let mut turns = Vec::new();
    let mut truncated_at = None;
    let mut current: Option<LogTurn> = None;
    let mut body: Vec<&str> = Vec::new();

    let flush = |current: &mut Option<LogTurn>, body: &mut Vec<&str>, turns: &mut Vec<LogTurn>| {
        if let Some(mut turn) = current.take() {
            turn.text = body.join("\n");
            turns.push(turn);
        }
        body.clear();
    };

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            flush(&mut current, &mut body, &mut turns);
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let turn = current.get_or_insert_with(|| LogTurn { line, ..LogTurn::new("", 0.0, false) });
        let Some(meta) = trimmed.strip_prefix('@') else {
            body.push(raw);
            continue;
        };
        let (key, value) = meta.split_once(char::is_whitespace).unwrap_or((meta, ""));
        let value = value.trim();
        let bad = |message: String| ParseError::Metadata { line, message };
        match key {
            "reward" => {
                turn.reward = value.parse().map_err(|_| bad(format!("bad reward {value:?}")))?;
            }
            "done" if value.is_empty() => turn.done = true,
            "state" => {
                turn.state = Some(value.parse().map_err(|_| bad(format!("bad state {value:?}")))?);
            }
            "truncated" => {
                truncated_at =
                    Some(value.parse().map_err(|_| bad(format!("bad final state {value:?}")))?);
            }
            _ => return Err(bad(format!("unknown metadata @{meta}"))),
        }
    }
    flush(&mut current, &mut body, &mut turns);
    Ok(Transcript { turns, truncated_at })
}

/// Result of ingesting one episode log.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedEpisode {
    pub trajectory: Trajectory,
    /// Interned subgoal strings; index = `SubgoalId`.
    pub subgoals: Vec<String>,
    /// Interned action strings; index = `ActionId`.
    pub actions: Vec<String>,
    pub decisions: Vec<ParsedDecision>,
    pub verdicts: Vec<FormatVerdict>,
}

impl IngestedEpisode {
    pub fn penalty_total(&self) -> f64 {
        self.verdicts.iter().map(|v| v.penalty).sum()
    }

    pub fn malformed_turns(&self) -> usize {
        self.verdicts.iter().filter(|v| !v.valid).count()
    }
}

#[derive(Default)]
struct Interner {
    ids: HashMap<String, usize>,
    names: Vec<String>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> usize {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.names.len();
        self.ids.insert(s.to_string(), id);
        self.names.push(s.to_string());
        id
    }
}

/// Builds a trajectory from ordered turns of one episode.
///
/// q is taken from the switch block but forced to SWITCH whenever the subgoal
/// string differs from the previous turn's (and on the first turn). Rewards
/// have format penalties folded in; `raw_reward` keeps the logged value. An
/// episode whose last turn is not `done` is truncated at `truncated_at`, or at
/// state `T` when none is given.
pub fn ingest_log(turns: &[LogTurn], truncated_at: Option<usize>) -> Result<IngestedEpisode, ParseError> {
    if turns.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut subgoals = Interner::default();
    let mut actions = Interner::default();
    let mut records = Vec::with_capacity(turns.len());
    let mut decisions = Vec::with_capacity(turns.len());
    let mut verdicts = Vec::with_capacity(turns.len());
    let mut prev: Option<(SubgoalId, String)> = None;

    for (t, log) in turns.iter().enumerate() {
        if t > 0 && turns[t - 1].done {
            return Err(ParseError::AfterDone { line: log.line });
        }
        let (mut decision, verdict) =
            parse_blocks_in_context(&log.text, prev.as_ref().map(|p| p.1.as_str()))
                .map_err(|_| ParseError::NoActionAt { line: log.line })?;
        let unchanged = prev.as_ref().is_some_and(|p| p.1 == decision.subgoal_text);
        if !unchanged {
            decision.q = Switch::Switch;
        }
        let subgoal = SubgoalId(subgoals.intern(&decision.subgoal_text));
        let action = ActionId(actions.intern(&decision.action_text));
        let state = State(log.state.unwrap_or(t));
        let mut record = TurnRecord::new(
            t,
            state,
            prev.as_ref().map(|p| p.0),
            decision.q,
            subgoal,
            action,
            log.reward - verdict.penalty,
        );
        record.raw_reward = log.reward;
        record.done = log.done;
        record.subgoal_text = Some(decision.subgoal_text.clone());
        record.format_valid = verdict.valid;
        prev = Some((subgoal, decision.subgoal_text.clone()));
        records.push(record);
        decisions.push(decision);
        verdicts.push(verdict);
    }

    let end = if records.last().is_some_and(|r| r.done) {
        EpisodeEnd::Terminal
    } else {
        EpisodeEnd::Truncated { final_state: State(truncated_at.unwrap_or(records.len())) }
    };
    let trajectory = Trajectory { turns: records, end, seed: 0 };
    debug_assert!(trajectory.validate().is_ok());
    Ok(IngestedEpisode {
        trajectory,
        subgoals: subgoals.names,
        actions: actions.names,
        decisions,
        verdicts,
    })
}

/// [`read_transcript`] followed by [`ingest_log`].
pub fn ingest_transcript(text: &str) -> Result<IngestedEpisode, ParseError> {
    let transcript = read_transcript(text)?;
    ingest_log(&transcript.turns, transcript.truncated_at)
}
