//! Environment abstraction and the two enumerable toy environments.

use crate::episode::{ActionId, State};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown action id {action} (environment has {n_actions} actions)")]
    UnknownAction { action: usize, n_actions: usize },
    #[error("state {0} is not a valid state of this environment")]
    InvalidState(usize),
    #[error("invalid environment parameter: {0}")]
    Config(String),
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: State,
    pub reward: f64,
    pub done: bool,
}

/// A finite, episodic environment with deterministic initial-state support.
pub trait EnvModel: Sync {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Episode length cap; rollouts truncate here.
    fn horizon(&self) -> usize;
    /// Initial-state distribution as `(state, probability)` pairs.
    fn initial_states(&self) -> Vec<(State, f64)>;
    fn is_terminal(&self, state: State) -> bool;
    fn step(&self, state: State, action: ActionId) -> Result<Transition, EnvError>;

    /// Human readable state label.
    fn describe(&self, state: State) -> String {
        format!("s{}", state.0)
    }

    /// Display names for the subgoal vocabulary, if the environment suggests one.
    fn subgoal_names(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Reward for a successful delivery.
pub const SUCCESS_REWARD: f64 = 10.0;
/// Reward for an action that is not valid in the current state.
pub const INVALID_ACTION_REWARD: f64 = -0.1;

pub const LEFT: ActionId = ActionId(0);
pub const RIGHT: ActionId = ActionId(1);
pub const PICKUP: ActionId = ActionId(2);
pub const DROP: ActionId = ActionId(3);

/// A corridor of `length` cells: walk to the far end, pick the item up,
/// bring it back to cell 0 and drop it for `+10`.
///
/// Plain states are `p * 2 + carrying`; the extra index `2 * length` is the
/// absorbing terminal state. With `timed`, the turn counter is part of the
/// state (`t * 2 * length + p * 2 + carrying`) and reaching the horizon is a
/// genuine terminal event, which makes the process Markov in the state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchChain {
    length: usize,
    horizon: usize,
    timed: bool,
}

/// Decoded FetchChain state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainCell {
    pub position: usize,
    pub carrying: bool,
    /// Turn counter, only tracked in timed mode.
    pub time: usize,
}

impl FetchChain {
    pub fn new(length: usize, horizon: usize) -> Result<Self, EnvError> {
        Self::build(length, horizon, false)
    }

    /// Variant whose state carries the turn counter.
    pub fn timed(length: usize, horizon: usize) -> Result<Self, EnvError> {
        Self::build(length, horizon, true)
    }

    fn build(length: usize, horizon: usize, timed: bool) -> Result<Self, EnvError> {
        if length < 2 {
            return Err(EnvError::Config(format!("FetchChain length must be >= 2, got {length}")));
        }
        if horizon < 1 {
            return Err(EnvError::Config("FetchChain horizon must be >= 1".into()));
        }
        Ok(Self { length, horizon, timed })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn is_timed(&self) -> bool {
        self.timed
    }

    fn cells(&self) -> usize {
        2 * self.length
    }

    fn terminal(&self) -> State {
        State(self.n_states() - 1)
    }

    pub fn encode(&self, cell: ChainCell) -> State {
        let base = cell.position * 2 + usize::from(cell.carrying);
        if self.timed {
            State(cell.time * self.cells() + base)
        } else {
            State(base)
        }
    }

    pub fn decode(&self, state: State) -> Result<ChainCell, EnvError> {
        if state.0 >= self.n_states() - 1 {
            return Err(EnvError::InvalidState(state.0));
        }
        let (time, base) = if self.timed {
            (state.0 / self.cells(), state.0 % self.cells())
        } else {
            (0, state.0)
        };
        Ok(ChainCell { position: base / 2, carrying: base % 2 == 1, time })
    }

    pub fn start(&self) -> State {
        self.encode(ChainCell { position: 0, carrying: false, time: 0 })
    }
}

impl EnvModel for FetchChain {
    fn n_states(&self) -> usize {
        let live = if self.timed { self.horizon * self.cells() } else { self.cells() };
        live + 1
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn initial_states(&self) -> Vec<(State, f64)> {
        vec![(self.start(), 1.0)]
    }

    fn is_terminal(&self, state: State) -> bool {
        state == self.terminal()
    }

    fn step(&self, state: State, action: ActionId) -> Result<Transition, EnvError> {
        if action.0 >= self.n_actions() {
            return Err(EnvError::UnknownAction { action: action.0, n_actions: self.n_actions() });
        }
        let cell = self.decode(state)?;
        let mut next = ChainCell { time: cell.time + 1, ..cell };
        let mut reward = 0.0;
        let mut success = false;
        match action {
            LEFT => next.position = cell.position.saturating_sub(1),
            RIGHT => next.position = (cell.position + 1).min(self.length - 1),
            PICKUP if cell.position == self.length - 1 && !cell.carrying => next.carrying = true,
            DROP if cell.position == 0 && cell.carrying => {
                reward = SUCCESS_REWARD;
                success = true;
            }
            _ => reward = INVALID_ACTION_REWARD,
        }
        let timed_out = self.timed && next.time >= self.horizon;
        if success || timed_out {
            Ok(Transition { next: self.terminal(), reward, done: true })
        } else {
            Ok(Transition { next: self.encode(next), reward, done: false })
        }
    }

    fn describe(&self, state: State) -> String {
        match self.decode(state) {
            Ok(c) if self.timed => format!("t{}:p{}{}", c.time, c.position, if c.carrying { "+" } else { "" }),
            Ok(c) => format!("p{}{}", c.position, if c.carrying { "+" } else { "" }),
            Err(_) => "terminal".into(),
        }
    }

    fn subgoal_names(&self) -> Vec<String> {
        vec!["fetch the item".into(), "return to the start".into()]
    }
}

/// A single decision: one state, `rewards.len()` actions, episode ends after
/// one turn with the chosen action's reward.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStep {
    rewards: Vec<f64>,
}

impl OneStep {
    /// Every action pays the same `reward`.
    pub fn constant(n_actions: usize, reward: f64) -> Result<Self, EnvError> {
        Self::with_rewards(vec![reward; n_actions])
    }

    pub fn with_rewards(rewards: Vec<f64>) -> Result<Self, EnvError> {
        if rewards.is_empty() {
            return Err(EnvError::Config("OneStep needs at least one action".into()));
        }
        Ok(Self { rewards })
    }
}

impl EnvModel for OneStep {
    fn n_states(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        self.rewards.len()
    }

    fn horizon(&self) -> usize {
        1
    }

    fn initial_states(&self) -> Vec<(State, f64)> {
        vec![(State(0), 1.0)]
    }

    fn is_terminal(&self, state: State) -> bool {
        state == State(1)
    }

    fn step(&self, state: State, action: ActionId) -> Result<Transition, EnvError> {
        if state != State(0) {
            return Err(EnvError::InvalidState(state.0));
        }
        let reward = *self.rewards.get(action.0).ok_or(EnvError::UnknownAction {
            action: action.0,
            n_actions: self.rewards.len(),
        })?;
        Ok(Transition { next: State(1), reward, done: true })
    }
}

/// Environments addressable by name from configuration files.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyEnv {
    FetchChain(FetchChain),
    OneStep(OneStep),
}

impl AnyEnv {
    pub fn as_model(&self) -> &dyn EnvModel {
        match self {
            AnyEnv::FetchChain(env) => env,
            AnyEnv::OneStep(env) => env,
        }
    }
}

impl EnvModel for AnyEnv {
    fn n_states(&self) -> usize {
        self.as_model().n_states()
    }
    fn n_actions(&self) -> usize {
        self.as_model().n_actions()
    }
    fn horizon(&self) -> usize {
        self.as_model().horizon()
    }
    fn initial_states(&self) -> Vec<(State, f64)> {
        self.as_model().initial_states()
    }
    fn is_terminal(&self, state: State) -> bool {
        self.as_model().is_terminal(state)
    }
    fn step(&self, state: State, action: ActionId) -> Result<Transition, EnvError> {
        self.as_model().step(state, action)
    }
    fn describe(&self, state: State) -> String {
        self.as_model().describe(state)
    }
    fn subgoal_names(&self) -> Vec<String> {
        self.as_model().subgoal_names()
    }
}
