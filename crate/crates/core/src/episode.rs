//! Turn records, episodes and the segment arithmetic every estimator consumes.
//!
//! A trajectory is split into segments by its SWITCH turns: the boundary set is
//! `0 = b_0 < b_1 < ... < b_K = T`, where the interior boundaries are exactly
//! the turns `t > 0` with `q_t = 1`. Each segment `[b_k, b_{k+1})` keeps one
//! subgoal and is summarised by a macro-reward and a duration discount.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment state index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub usize);

/// Index into the finite subgoal vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubgoalId(pub usize);

/// Primitive action index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

/// The binary switch decision `q_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Switch {
    /// `q = 0`: carry the previous subgoal over.
    Keep,
    /// `q = 1`: terminate the current subgoal and pick a new one.
    Switch,
}

impl Switch {
    pub fn from_q(q: u8) -> Option<Self> {
        match q {
            0 => Some(Switch::Keep),
            1 => Some(Switch::Switch),
            _ => None,
        }
    }

    pub fn q(self) -> u8 {
        match self {
            Switch::Keep => 0,
            Switch::Switch => 1,
        }
    }

    /// `q` as a real, for the centered switching weight `q - beta`.
    pub fn as_f64(self) -> f64 {
        f64::from(self.q())
    }

    pub fn index(self) -> usize {
        self.q() as usize
    }

    pub fn is_switch(self) -> bool {
        self == Switch::Switch
    }
}

/// Behavior-policy log-probabilities recorded when a turn was sampled.
///
/// `switch_logp` and `beta` are absent at `t = 0` (the first switch is forced);
/// `subgoal_logp` is present iff the turn switched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub switch_logp: Option<f64>,
    pub subgoal_logp: Option<f64>,
    pub action_logp: f64,
    pub beta: Option<f64>,
}

/// One environment turn `(s_t, q_t, o_t, a_t, r_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnRecord {
    pub t: usize,
    pub state: State,
    pub prev_subgoal: Option<SubgoalId>,
    pub switch: Switch,
    pub subgoal: SubgoalId,
    pub subgoal_text: Option<String>,
    pub action: ActionId,
    /// Reward after shaping (KEEP penalty, format penalty).
    pub reward: f64,
    /// Environment reward before shaping.
    pub raw_reward: f64,
    pub done: bool,
    pub behavior: Option<BehaviorRecord>,
    /// False when the turn came from a malformed transcript record.
    pub format_valid: bool,
}

impl TurnRecord {
    /// A well-formed turn with no text, no behavior record and `reward == raw_reward`.
    pub fn new(
        t: usize,
        state: State,
        prev_subgoal: Option<SubgoalId>,
        switch: Switch,
        subgoal: SubgoalId,
        action: ActionId,
        reward: f64,
    ) -> Self {
        Self {
            t,
            state,
            prev_subgoal,
            switch,
            subgoal,
            subgoal_text: None,
            action,
            reward,
            raw_reward: reward,
            done: false,
            behavior: None,
            format_valid: true,
        }
    }

    pub fn q(&self) -> f64 {
        self.switch.as_f64()
    }
}

/// How an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeEnd {
    /// The environment reported `done`; bootstrap value after the last turn is 0.
    Terminal,
    /// The horizon was hit first; `final_state` is `s_T`, used for bootstrapping.
    Truncated { final_state: State },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub turns: Vec<TurnRecord>,
    pub end: EpisodeEnd,
    /// Seed of the task/episode that produced it.
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("trajectory is empty")]
    Empty,
    #[error("first turn must switch (q_0 = 1)")]
    FirstTurnKeeps,
    #[error("turn {t}: KEEP with subgoal {found} but previous subgoal {expected:?}")]
    KeepChangedSubgoal {
        t: usize,
        expected: Option<usize>,
        found: usize,
    },
    #[error("turn {t}: prev_subgoal does not match the subgoal of turn {}", t - 1)]
    PrevSubgoalMismatch { t: usize },
    #[error("turn at position {position} has index {t}")]
    TurnIndex { position: usize, t: usize },
    #[error("turn {t}: done flag set before the last turn")]
    EarlyDone { t: usize },
    #[error("episode end flag disagrees with the done flag of the last turn")]
    EndMismatch,
    #[error("turn index {t} out of range for a trajectory of length {len}")]
    OutOfRange { t: usize, len: usize },
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.end == EpisodeEnd::Terminal
    }

    /// State `s_t` for `t <= T`; `s_T` is only known for truncated episodes.
    pub fn state_at(&self, t: usize) -> Option<State> {
        if t < self.turns.len() {
            Some(self.turns[t].state)
        } else if t == self.turns.len() {
            match self.end {
                EpisodeEnd::Truncated { final_state } => Some(final_state),
                EpisodeEnd::Terminal => None,
            }
        } else {
            None
        }
    }

    /// Checks every turn-record and episode invariant.
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let first = self.turns.first().ok_or(EpisodeError::Empty)?;
        if !first.switch.is_switch() {
            return Err(EpisodeError::FirstTurnKeeps);
        }
        let last = self.turns.len() - 1;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.t != i {
                return Err(EpisodeError::TurnIndex { position: i, t: turn.t });
            }
            let expected_prev = if i == 0 { None } else { Some(self.turns[i - 1].subgoal) };
            if i > 0 && turn.prev_subgoal != expected_prev {
                return Err(EpisodeError::PrevSubgoalMismatch { t: i });
            }
            if turn.switch == Switch::Keep && Some(turn.subgoal) != turn.prev_subgoal {
                return Err(EpisodeError::KeepChangedSubgoal {
                    t: i,
                    expected: turn.prev_subgoal.map(|o| o.0),
                    found: turn.subgoal.0,
                });
            }
            if turn.done && i != last {
                return Err(EpisodeError::EarlyDone { t: i });
            }
        }
        if self.turns[last].done != self.is_terminal() {
            return Err(EpisodeError::EndMismatch);
        }
        Ok(())
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.turns.iter().map(|turn| turn.reward)
    }

    /// Undiscounted sum of unshaped rewards.
    pub fn raw_return(&self) -> f64 {
        self.turns.iter().map(|turn| turn.raw_reward).sum()
    }

    /// Discounted return `sum_t gamma^t r_t` of the shaped rewards.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.turns
            .iter()
            .rev()
            .fold(0.0, |acc, turn| turn.reward + gamma * acc)
    }
}

/// The segment partition of one trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    boundaries: Vec<usize>,
}

impl Segmentation {
    pub fn of(traj: &Trajectory) -> Result<Self, EpisodeError> {
        segment_boundaries(traj).map(|boundaries| Self { boundaries })
    }

    /// `[b_0, ..., b_K]`.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Number of segments `K`.
    pub fn count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        self.boundaries[k]..self.boundaries[k + 1]
    }

    /// Index `k` of the segment containing turn `t`.
    pub fn segment_of(&self, t: usize) -> usize {
        // boundaries[0] == 0 <= t, so the partition point is at least 1.
        self.boundaries.partition_point(|&b| b <= t) - 1
    }

    /// Exclusive end `b_{k+1}` of the segment containing `t`.
    pub fn segment_end(&self, t: usize) -> usize {
        self.boundaries[self.segment_of(t) + 1]
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.boundaries.windows(2).map(|w| w[0]..w[1])
    }
}

/// Boundary indices `[b_0 = 0, ..., b_K = T]`.
pub fn segment_boundaries(traj: &Trajectory) -> Result<Vec<usize>, EpisodeError> {
    let first = traj.turns.first().ok_or(EpisodeError::Empty)?;
    if !first.switch.is_switch() {
        return Err(EpisodeError::FirstTurnKeeps);
    }
    let mut boundaries: Vec<usize> = traj
        .turns
        .iter()
        .enumerate()
        .filter(|(_, turn)| turn.switch.is_switch())
        .map(|(t, _)| t)
        .collect();
    boundaries.push(traj.turns.len());
    Ok(boundaries)
}

/// A maximal constant-subgoal run compressed into one macro-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentView {
    pub k: usize,
    pub start: usize,
    pub end: usize,
    pub subgoal: SubgoalId,
    /// `sum_{t=start}^{end-1} gamma^(t-start) r_t`.
    pub macro_reward: f64,
    /// `gamma^(end - start)`.
    pub duration_discount: f64,
}

impl SegmentView {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

fn check_gamma(gamma: f64) -> Result<(), EpisodeError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(EpisodeError::Gamma(gamma))
    }
}

pub fn segment_views(traj: &Trajectory, gamma: f64) -> Result<Vec<SegmentView>, EpisodeError> {
    check_gamma(gamma)?;
    let seg = Segmentation::of(traj)?;
    Ok(views_from(traj, &seg, gamma))
}

pub(crate) fn views_from(traj: &Trajectory, seg: &Segmentation, gamma: f64) -> Vec<SegmentView> {
    seg.ranges()
        .enumerate()
        .map(|(k, range)| {
            let macro_reward = traj.turns[range.clone()]
                .iter()
                .rev()
                .fold(0.0, |acc, turn| turn.reward + gamma * acc);
            SegmentView {
                k,
                start: range.start,
                end: range.end,
                subgoal: traj.turns[range.start].subgoal,
                macro_reward,
                duration_discount: gamma.powi((range.end - range.start) as i32),
            }
        })
        .collect()
}

/// `G_t = sum_{t' >= t} gamma^(t'-t) r_t'`.
pub fn return_to_go(traj: &Trajectory, gamma: f64, t: usize) -> Result<f64, EpisodeError> {
    if t >= traj.turns.len() {
        return Err(EpisodeError::OutOfRange { t, len: traj.turns.len() });
    }
    Ok(traj.turns[t..]
        .iter()
        .rev()
        .fold(0.0, |acc, turn| turn.reward + gamma * acc))
}

/// All returns-to-go `G_0..G_{T-1}` in one backward pass.
pub fn returns_to_go(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; traj.turns.len()];
    let mut acc = 0.0;
    for (t, turn) in traj.turns.iter().enumerate().rev() {
        acc = turn.reward + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Subtracts `c_keep` from the shaped reward of every KEEP turn.
pub fn apply_keep_penalty(traj: &Trajectory, c_keep: f64) -> Trajectory {
    let mut shaped = traj.clone();
    for turn in shaped.turns.iter_mut() {
        if turn.switch == Switch::Keep {
            turn.reward -= c_keep;
        }
    }
    shaped
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Terminal trajectory with the given switch pattern and rewards; subgoals
    /// alternate on every switch, states are `0..T`.
    pub fn traj(q: &[u8], rewards: &[f64]) -> Trajectory {
        assert_eq!(q.len(), rewards.len());
        let mut turns = Vec::new();
        let mut prev: Option<SubgoalId> = None;
        for (t, (&qt, &r)) in q.iter().zip(rewards).enumerate() {
            let switch = Switch::from_q(qt).unwrap();
            let subgoal = match (switch, prev) {
                (Switch::Keep, Some(o)) => o,
                (_, Some(o)) => SubgoalId(1 - o.0),
                (_, None) => SubgoalId(0),
            };
            let mut turn = TurnRecord::new(t, State(t), prev, switch, subgoal, ActionId(0), r);
            turn.done = t + 1 == q.len();
            turns.push(turn);
            prev = Some(subgoal);
        }
        Trajectory { turns, end: EpisodeEnd::Terminal, seed: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::traj;
    use super::*;

    #[test]
    fn boundaries_single_turn() {
        assert_eq!(segment_boundaries(&traj(&[1], &[0.0])).unwrap(), vec![0, 1]);
    }

    #[test]
    fn boundaries_mixed() {
        let t = traj(&[1, 0, 0, 1, 0], &[0.0; 5]);
        assert_eq!(segment_boundaries(&t).unwrap(), vec![0, 3, 5]);
    }

    #[test]
    fn boundaries_all_switch() {
        let t = traj(&[1, 1, 1], &[0.0; 3]);
        assert_eq!(segment_boundaries(&t).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn boundaries_reject_keep_first() {
        let mut t = traj(&[1, 0], &[0.0; 2]);
        t.turns[0].switch = Switch::Keep;
        assert_eq!(segment_boundaries(&t), Err(EpisodeError::FirstTurnKeeps));
        let empty = Trajectory { turns: vec![], end: EpisodeEnd::Terminal, seed: 0 };
        assert_eq!(segment_boundaries(&empty), Err(EpisodeError::Empty));
    }

    #[test]
    fn segment_of_lookup() {
        let t = traj(&[1, 0, 0, 1, 0], &[0.0; 5]);
        let seg = Segmentation::of(&t).unwrap();
        let ks: Vec<usize> = (0..5).map(|i| seg.segment_of(i)).collect();
        assert_eq!(ks, vec![0, 0, 0, 1, 1]);
        assert_eq!(seg.segment_end(2), 3);
        assert_eq!(seg.segment_end(3), 5);
    }

    #[test]
    fn views_zero_rewards() {
        let v = segment_views(&traj(&[1, 0, 0], &[0.0; 3]), 1.0).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].macro_reward, 0.0);
        assert_eq!(v[0].duration_discount, 1.0);
    }

    #[test]
    fn views_discounted_sum() {
        let v = segment_views(&traj(&[1, 0, 0], &[1.0, 2.0, 4.0]), 0.5).unwrap();
        assert_eq!(v[0].macro_reward, 3.0);
        assert_eq!(v[0].duration_discount, 0.125);
    }

    #[test]
    fn views_single_terminal_turn() {
        let v = segment_views(&traj(&[1], &[10.0]), 0.9).unwrap();
        assert_eq!(v[0].macro_reward, 10.0);
        assert!((v[0].duration_discount - 0.9).abs() < 1e-15);
    }

    #[test]
    fn views_reject_bad_gamma() {
        let t = traj(&[1], &[1.0]);
        assert_eq!(segment_views(&t, 0.0), Err(EpisodeError::Gamma(0.0)));
        assert_eq!(segment_views(&t, 1.5), Err(EpisodeError::Gamma(1.5)));
    }

    #[test]
    fn return_to_go_examples() {
        let t = traj(&[1, 0, 0], &[3.0, 5.0, 7.0]);
        // gamma = 0 is outside (0,1] for segment views, but the tail sum is still defined.
        assert_eq!(return_to_go(&t, 0.0, 1).unwrap(), 5.0);
        assert_eq!(return_to_go(&traj(&[1, 0, 0], &[1.0; 3]), 1.0, 0).unwrap(), 3.0);
        assert_eq!(
            return_to_go(&traj(&[1, 0, 0], &[0.0, 0.0, 10.0]), 0.5, 0).unwrap(),
            2.5
        );
        assert_eq!(
            return_to_go(&t, 1.0, 3),
            Err(EpisodeError::OutOfRange { t: 3, len: 3 })
        );
    }

    #[test]
    fn keep_penalty_examples() {
        let t = traj(&[1, 0, 0], &[0.0, 0.0, 10.0]);
        assert_eq!(apply_keep_penalty(&t, 0.0), t);
        let shaped = apply_keep_penalty(&t, 0.3);
        let r: Vec<f64> = shaped.rewards().collect();
        assert_eq!(r[0], 0.0);
        assert!((r[1] + 0.3).abs() < 1e-15);
        assert!((r[2] - 9.7).abs() < 1e-12);
        let raw: Vec<f64> = shaped.turns.iter().map(|x| x.raw_reward).collect();
        assert_eq!(raw, vec![0.0, 0.0, 10.0]);
    }

    #[test]
    fn validate_catches_inconsistent_keep() {
        let mut t = traj(&[1, 0], &[0.0; 2]);
        t.validate().unwrap();
        t.turns[1].subgoal = SubgoalId(7);
        assert!(matches!(
            t.validate(),
            Err(EpisodeError::KeepChangedSubgoal { t: 1, .. })
        ));
    }

    #[test]
    fn validate_catches_end_mismatch() {
        let mut t = traj(&[1, 0], &[0.0; 2]);
        t.end = EpisodeEnd::Truncated { final_state: State(9) };
        assert_eq!(t.validate(), Err(EpisodeError::EndMismatch));
        t.turns[1].done = false;
        t.validate().unwrap();
        assert_eq!(t.state_at(2), Some(State(9)));
    }
}
