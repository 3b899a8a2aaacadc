//! Tabular softmax policy with three heads: switch `pi(q | s, o_prev)`,
//! subgoal `pi(o | s)` and action `pi(a | s, o)`.
//!
//! Log-probabilities and score functions are exact; the score of a softmax
//! row with probabilities `p` at chosen index `i` is `e_i - p`.

use crate::env::{EnvError, EnvModel};
use crate::episode::{
    ActionId, BehaviorRecord, EpisodeEnd, State, SubgoalId, Switch, Trajectory, TurnRecord,
};
use crate::rng::{inverse_cdf, Draw, EpisodeKey};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("turn {t}: KEEP turn carries subgoal {found} but previous subgoal is {expected:?}")]
    InconsistentTurn { t: usize, expected: Option<usize>, found: usize },
    #[error("turn {t}: KEEP at the first turn has no previous subgoal")]
    MissingPrevSubgoal { t: usize },
    #[error("turn {t}: index out of range ({what} {index} >= {bound})")]
    Index { t: usize, what: &'static str, index: usize, bound: usize },
    #[error("table shapes differ: {0:?} vs {1:?}")]
    Shape(Dims, Dims),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Table sizes `(|S|, |O|, |A|)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub states: usize,
    pub options: usize,
    pub actions: usize,
}

impl Dims {
    pub fn new(states: usize, options: usize, actions: usize) -> Self {
        Self { states, options, actions }
    }

    pub fn for_env(env: &dyn EnvModel, options: usize) -> Self {
        Self::new(env.n_states(), options, env.n_actions())
    }

    pub fn switch_len(&self) -> usize {
        self.states * self.options * 2
    }

    pub fn subgoal_len(&self) -> usize {
        self.states * self.options
    }

    pub fn action_len(&self) -> usize {
        self.states * self.options * self.actions
    }

    /// Offset of the switch row for `(s, o_prev)`; the row has 2 entries `[KEEP, SWITCH]`.
    pub fn switch_row(&self, s: State, o_prev: SubgoalId) -> usize {
        (s.0 * self.options + o_prev.0) * 2
    }

    /// Offset of the subgoal row for `s`; the row has `options` entries.
    pub fn subgoal_row(&self, s: State) -> usize {
        s.0 * self.options
    }

    /// Offset of the action row for `(s, o)`; the row has `actions` entries.
    pub fn action_row(&self, s: State, o: SubgoalId) -> usize {
        (s.0 * self.options + o.0) * self.actions
    }
}

/// Which conditional a table row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Switch,
    Subgoal,
    Action,
}

macro_rules! head_tables {
    ($name:ident) => {
        impl $name {
            pub fn zeros(dims: Dims) -> Self {
                Self {
                    dims,
                    switch: vec![0.0; dims.switch_len()],
                    subgoal: vec![0.0; dims.subgoal_len()],
                    action: vec![0.0; dims.action_len()],
                }
            }

            pub fn head(&self, head: Head) -> &[f64] {
                match head {
                    Head::Switch => &self.switch,
                    Head::Subgoal => &self.subgoal,
                    Head::Action => &self.action,
                }
            }

            pub fn head_mut(&mut self, head: Head) -> &mut [f64] {
                match head {
                    Head::Switch => &mut self.switch,
                    Head::Subgoal => &mut self.subgoal,
                    Head::Action => &mut self.action,
                }
            }

            /// Number of scalar coordinates across all heads.
            pub fn len(&self) -> usize {
                self.switch.len() + self.subgoal.len() + self.action.len()
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            /// All coordinates in the order switch, subgoal, action.
            pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
                self.switch.iter().chain(self.subgoal.iter()).chain(self.action.iter())
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
                self.switch
                    .iter_mut()
                    .chain(self.subgoal.iter_mut())
                    .chain(self.action.iter_mut())
            }

            /// Flat coordinate `i` mapped to `(head, offset)`.
            pub fn locate(&self, i: usize) -> (Head, usize) {
                let (s, g) = (self.switch.len(), self.subgoal.len());
                if i < s {
                    (Head::Switch, i)
                } else if i < s + g {
                    (Head::Subgoal, i - s)
                } else {
                    (Head::Action, i - s - g)
                }
            }

            pub fn get(&self, i: usize) -> f64 {
                let (head, j) = self.locate(i);
                self.head(head)[j]
            }

            pub fn set(&mut self, i: usize, value: f64) {
                let (head, j) = self.locate(i);
                self.head_mut(head)[j] = value;
            }

            pub fn is_finite(&self) -> bool {
                self.iter().all(|x| x.is_finite())
            }
        }
    };
}

/// Logit tables realising the three conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: Dims,
    /// `[s][o_prev][KEEP, SWITCH]`
    pub switch: Vec<f64>,
    /// `[s][o]`
    pub subgoal: Vec<f64>,
    /// `[s][o][a]`
    pub action: Vec<f64>,
}

/// Gradient (or any other quantity) shaped like [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradTables {
    pub dims: Dims,
    pub switch: Vec<f64>,
    pub subgoal: Vec<f64>,
    pub action: Vec<f64>,
}

head_tables!(PolicyParams);
head_tables!(GradTables);

impl PolicyParams {
    /// Independent `N(0, scale^2)` logits.
    pub fn random<R: Rng + ?Sized>(dims: Dims, scale: f64, rng: &mut R) -> Self {
        let mut params = Self::zeros(dims);
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale).expect("finite positive scale");
            params.iter_mut().for_each(|x| *x = normal.sample(rng));
        }
        params
    }

    /// `self += step * grad`.
    pub fn add_scaled(&mut self, grad: &GradTables, step: f64) -> Result<(), PolicyError> {
        if grad.dims != self.dims {
            return Err(PolicyError::Shape(self.dims, grad.dims));
        }
        self.iter_mut().zip(grad.iter()).for_each(|(x, g)| *x += step * g);
        Ok(())
    }

    fn row(&self, head: Head, offset: usize) -> &[f64] {
        let width = row_width(self.dims, head);
        &self.head(head)[offset..offset + width]
    }

    pub fn switch_probs(&self, s: State, o_prev: SubgoalId) -> Vec<f64> {
        softmax(self.row(Head::Switch, self.dims.switch_row(s, o_prev)))
    }

    pub fn subgoal_probs(&self, s: State) -> Vec<f64> {
        softmax(self.row(Head::Subgoal, self.dims.subgoal_row(s)))
    }

    pub fn action_probs(&self, s: State, o: SubgoalId) -> Vec<f64> {
        softmax(self.row(Head::Action, self.dims.action_row(s, o)))
    }

    /// Probabilities of the row at `offset` in `head`.
    pub fn row_probs(&self, head: Head, offset: usize) -> Vec<f64> {
        softmax(self.row(head, offset))
    }
}

impl GradTables {
    pub fn add_assign(&mut self, other: &GradTables) {
        self.iter_mut().zip(other.iter()).for_each(|(x, y)| *x += y);
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn dot(&self, other: &GradTables) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }
}

pub(crate) fn row_width(dims: Dims, head: Head) -> usize {
    match head {
        Head::Switch => 2,
        Head::Subgoal => dims.options,
        Head::Action => dims.actions,
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log softmax(logits)[i]`.
pub fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits[i] - lse
}

/// `beta = pi(q = 1 | s, o_prev)`.
pub fn switch_prob(params: &PolicyParams, s: State, o_prev: SubgoalId) -> f64 {
    params.switch_probs(s, o_prev)[Switch::Switch.index()]
}

/// Per-head log-probabilities of one turn under some policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnLogProbs {
    /// Absent at `t = 0`.
    pub switch: Option<f64>,
    /// Present iff `q = 1`.
    pub subgoal: Option<f64>,
    pub action: f64,
}

impl TurnLogProbs {
    pub fn total(&self) -> f64 {
        self.switch.unwrap_or(0.0) + self.subgoal.unwrap_or(0.0) + self.action
    }
}

/// A sampled `(q, o, a)` together with the behavior log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledTurn {
    pub switch: Switch,
    pub subgoal: SubgoalId,
    pub action: ActionId,
    pub behavior: BehaviorRecord,
}

fn check_index(t: usize, what: &'static str, index: usize, bound: usize) -> Result<(), PolicyError> {
    if index < bound {
        Ok(())
    } else {
        Err(PolicyError::Index { t, what, index, bound })
    }
}

pub(crate) fn check_turn(params: &PolicyParams, turn: &TurnRecord) -> Result<(), PolicyError> {
    let d = params.dims;
    check_index(turn.t, "state", turn.state.0, d.states)?;
    check_index(turn.t, "subgoal", turn.subgoal.0, d.options)?;
    check_index(turn.t, "action", turn.action.0, d.actions)?;
    if let Some(prev) = turn.prev_subgoal {
        check_index(turn.t, "prev_subgoal", prev.0, d.options)?;
    }
    if turn.switch == Switch::Keep {
        match turn.prev_subgoal {
            None => return Err(PolicyError::MissingPrevSubgoal { t: turn.t }),
            Some(prev) if prev != turn.subgoal => {
                return Err(PolicyError::InconsistentTurn {
                    t: turn.t,
                    expected: Some(prev.0),
                    found: turn.subgoal.0,
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// The switch-row context of a turn: `None` at a forced first switch.
fn switch_context(turn: &TurnRecord) -> Option<SubgoalId> {
    if turn.t == 0 {
        None
    } else {
        turn.prev_subgoal
    }
}

/// Log-probabilities of the heads present in `turn`.
pub fn log_prob(params: &PolicyParams, turn: &TurnRecord) -> Result<TurnLogProbs, PolicyError> {
    check_turn(params, turn)?;
    let d = params.dims;
    let switch = switch_context(turn).map(|prev| {
        log_softmax_at(params.row(Head::Switch, d.switch_row(turn.state, prev)), turn.switch.index())
    });
    let subgoal = turn.switch.is_switch().then(|| {
        log_softmax_at(params.row(Head::Subgoal, d.subgoal_row(turn.state)), turn.subgoal.0)
    });
    let action = log_softmax_at(
        params.row(Head::Action, d.action_row(turn.state, turn.subgoal)),
        turn.action.0,
    );
    Ok(TurnLogProbs { switch, subgoal, action })
}

/// `grad[row] += weight * (e_chosen - p)` for the row at `offset` of `head`.
pub(crate) fn add_row_score(
    params: &PolicyParams,
    head: Head,
    offset: usize,
    chosen: usize,
    weight: f64,
    grad: &mut GradTables,
) {
    if weight == 0.0 {
        return;
    }
    let probs = params.row_probs(head, offset);
    let row = &mut grad.head_mut(head)[offset..offset + probs.len()];
    for (i, (g, p)) in row.iter_mut().zip(probs).enumerate() {
        let indicator = if i == chosen { 1.0 } else { 0.0 };
        *g += weight * (indicator - p);
    }
}

/// Per-head weights for accumulating score terms of one turn.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadWeights {
    pub switch: f64,
    pub subgoal: f64,
    pub action: f64,
}

impl HeadWeights {
    pub fn uniform(w: f64) -> Self {
        Self { switch: w, subgoal: w, action: w }
    }
}

/// Accumulates `w_switch * grad log pi(q) + w_subgoal * q * grad log pi(o) +
/// w_action * grad log pi(a)` into `grad`. Heads absent from the turn
/// contribute nothing.
pub fn accumulate_score(
    params: &PolicyParams,
    turn: &TurnRecord,
    weights: HeadWeights,
    grad: &mut GradTables,
) -> Result<(), PolicyError> {
    check_turn(params, turn)?;
    let d = params.dims;
    if let Some(prev) = switch_context(turn) {
        let offset = d.switch_row(turn.state, prev);
        add_row_score(params, Head::Switch, offset, turn.switch.index(), weights.switch, grad);
    }
    if turn.switch.is_switch() {
        let offset = d.subgoal_row(turn.state);
        add_row_score(params, Head::Subgoal, offset, turn.subgoal.0, weights.subgoal, grad);
    }
    let offset = d.action_row(turn.state, turn.subgoal);
    add_row_score(params, Head::Action, offset, turn.action.0, weights.action, grad);
    Ok(())
}

/// A head present in a turn: its row offset and the chosen index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadChoice {
    pub head: Head,
    pub offset: usize,
    pub chosen: usize,
}

/// The heads present in `turn` (switch from `t = 1`, subgoal on switches, action always).
pub fn turn_heads(dims: Dims, turn: &TurnRecord) -> Vec<HeadChoice> {
    let mut out = Vec::with_capacity(3);
    if let Some(prev) = switch_context(turn) {
        out.push(HeadChoice { head: Head::Switch, offset: dims.switch_row(turn.state, prev), chosen: turn.switch.index() });
    }
    if turn.switch.is_switch() {
        out.push(HeadChoice { head: Head::Subgoal, offset: dims.subgoal_row(turn.state), chosen: turn.subgoal.0 });
    }
    out.push(HeadChoice { head: Head::Action, offset: dims.action_row(turn.state, turn.subgoal), chosen: turn.action.0 });
    out
}

/// Analytic score `grad_theta log pi(turn)` summed over the heads present.
pub fn grad_log_prob(params: &PolicyParams, turn: &TurnRecord) -> Result<GradTables, PolicyError> {
    let mut grad = GradTables::zeros(params.dims);
    accumulate_score(params, turn, HeadWeights::uniform(1.0), &mut grad)?;
    Ok(grad)
}

/// Samples `(q, o, a)` at turn `t`; `o_prev = None` forces a switch.
pub fn sample_turn(
    params: &PolicyParams,
    s: State,
    o_prev: Option<SubgoalId>,
    key: &EpisodeKey,
    t: usize,
) -> SampledTurn {
    choose_turn(params, s, o_prev, |probs, draw| inverse_cdf(probs, key.uniform(t, draw)))
}

/// Greedy `(q, o, a)`; ties go to the lowest index.
pub fn greedy_turn(params: &PolicyParams, s: State, o_prev: Option<SubgoalId>) -> SampledTurn {
    choose_turn(params, s, o_prev, |probs, _| argmax(probs))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn choose_turn(
    params: &PolicyParams,
    s: State,
    o_prev: Option<SubgoalId>,
    mut pick: impl FnMut(&[f64], Draw) -> usize,
) -> SampledTurn {
    let (switch, switch_logp, beta) = match o_prev {
        None => (Switch::Switch, None, None),
        Some(prev) => {
            let probs = params.switch_probs(s, prev);
            let q = if pick(&probs, Draw::Switch) == 1 { Switch::Switch } else { Switch::Keep };
            (q, Some(probs[q.index()].ln()), Some(probs[1]))
        }
    };
    let (subgoal, subgoal_logp) = match (switch, o_prev) {
        (Switch::Keep, Some(prev)) => (prev, None),
        _ => {
            let probs = params.subgoal_probs(s);
            let o = pick(&probs, Draw::Subgoal);
            (SubgoalId(o), Some(probs[o].ln()))
        }
    };
    let probs = params.action_probs(s, subgoal);
    let a = pick(&probs, Draw::Action);
    SampledTurn {
        switch,
        subgoal,
        action: ActionId(a),
        behavior: BehaviorRecord {
            switch_logp,
            subgoal_logp,
            action_logp: probs[a].ln(),
            beta,
        },
    }
}

/// How turn decisions are drawn during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Stochastic(EpisodeKey),
    Greedy,
}

/// Runs one episode from the environment's first initial state.
///
/// The KEEP penalty `c_keep` is folded into the shaped reward; behavior
/// log-probabilities are stored on every turn.
pub fn rollout(
    env: &dyn EnvModel,
    params: &PolicyParams,
    horizon: usize,
    key: EpisodeKey,
    c_keep: f64,
) -> Result<Trajectory, PolicyError> {
    rollout_with(env, params, horizon, Sampling::Stochastic(key), c_keep)
}

pub fn rollout_with(
    env: &dyn EnvModel,
    params: &PolicyParams,
    horizon: usize,
    sampling: Sampling,
    c_keep: f64,
) -> Result<Trajectory, PolicyError> {
    let horizon = horizon.max(1);
    let mut state = start_state(env, &sampling);
    let mut prev: Option<SubgoalId> = None;
    let mut turns = Vec::with_capacity(horizon);
    let seed = match sampling {
        Sampling::Stochastic(key) => key.episode,
        Sampling::Greedy => 0,
    };
    for t in 0..horizon {
        let turn = match sampling {
            Sampling::Stochastic(key) => sample_turn(params, state, prev, &key, t),
            Sampling::Greedy => greedy_turn(params, state, prev),
        };
        let tr = env.step(state, turn.action)?;
        let penalty = if turn.switch == Switch::Keep { c_keep } else { 0.0 };
        turns.push(TurnRecord {
            t,
            state,
            prev_subgoal: prev,
            switch: turn.switch,
            subgoal: turn.subgoal,
            subgoal_text: None,
            action: turn.action,
            reward: tr.reward - penalty,
            raw_reward: tr.reward,
            done: tr.done,
            behavior: Some(turn.behavior),
            format_valid: true,
        });
        if tr.done {
            return Ok(Trajectory { turns, end: EpisodeEnd::Terminal, seed });
        }
        state = tr.next;
        prev = Some(turn.subgoal);
    }
    Ok(Trajectory { turns, end: EpisodeEnd::Truncated { final_state: state }, seed })
}

fn start_state(env: &dyn EnvModel, sampling: &Sampling) -> State {
    let starts = env.initial_states();
    match sampling {
        Sampling::Stochastic(key) if starts.len() > 1 => {
            let probs: Vec<f64> = starts.iter().map(|(_, p)| *p).collect();
            // initial-state draw lives on the switch stream of a virtual turn
            starts[inverse_cdf(&probs, key.uniform(usize::MAX / 8, Draw::Switch))].0
        }
        _ => starts[0].0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FetchChain, DROP, LEFT, PICKUP, RIGHT};
    use crate::episode::testutil::traj;
    use crate::rng::stream;

    fn dims() -> Dims {
        Dims::new(5, 2, 2)
    }

    #[test]
    fn switch_prob_examples() {
        let mut p = PolicyParams::zeros(dims());
        assert_eq!(switch_prob(&p, State(0), SubgoalId(0)), 0.5);
        let off = p.dims.switch_row(State(0), SubgoalId(0));
        p.switch[off + 1] = 3f64.ln();
        assert!((switch_prob(&p, State(0), SubgoalId(0)) - 0.75).abs() < 1e-15);
        p.switch[off + 1] = -1e9;
        assert!(switch_prob(&p, State(0), SubgoalId(0)) < 1e-300);
    }

    #[test]
    fn deterministic_heads_give_argmax_and_zero_logp() {
        let mut p = PolicyParams::zeros(Dims::new(1, 2, 3));
        let d = p.dims;
        p.switch[d.switch_row(State(0), SubgoalId(1))] = 1e9; // KEEP
        p.action[d.action_row(State(0), SubgoalId(1)) + 2] = 1e9;
        let key = EpisodeKey::new(3, 0);
        let turn = sample_turn(&p, State(0), Some(SubgoalId(1)), &key, 4);
        assert_eq!((turn.switch, turn.subgoal, turn.action), (Switch::Keep, SubgoalId(1), ActionId(2)));
        assert!(turn.behavior.switch_logp.unwrap().abs() < 1e-12);
        assert!(turn.behavior.action_logp.abs() < 1e-12);
        assert!(turn.behavior.subgoal_logp.is_none());
    }

    #[test]
    fn first_turn_forces_switch() {
        let mut p = PolicyParams::zeros(dims());
        // even a policy that always keeps cannot keep at t = 0
        for o in 0..2 {
            let off = p.dims.switch_row(State(0), SubgoalId(o));
            p.switch[off] = 1e9;
        }
        for episode in 0..20 {
            let turn = sample_turn(&p, State(0), None, &EpisodeKey::new(1, episode), 0);
            assert_eq!(turn.switch, Switch::Switch);
            assert!(turn.behavior.switch_logp.is_none());
            assert!(turn.behavior.beta.is_none());
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let env = FetchChain::new(3, 8).unwrap();
        let p = PolicyParams::zeros(Dims::for_env(&env, 2));
        let a = sample_turn(&p, env.start(), Some(SubgoalId(0)), &EpisodeKey::new(11, 5), 2);
        let b = sample_turn(&p, env.start(), Some(SubgoalId(0)), &EpisodeKey::new(11, 5), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn log_prob_uniform_and_absent_heads() {
        let p = PolicyParams::zeros(dims());
        let t = traj(&[1, 0], &[0.0, 0.0]);
        let first = log_prob(&p, &t.turns[0]).unwrap();
        assert!(first.switch.is_none());
        assert!((first.subgoal.unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!((first.action - 0.5f64.ln()).abs() < 1e-15);
        let keep = log_prob(&p, &t.turns[1]).unwrap();
        assert!(keep.subgoal.is_none());
        assert!(keep.switch.is_some());
    }

    #[test]
    fn log_prob_rejects_inconsistent_keep() {
        let p = PolicyParams::zeros(dims());
        let mut t = traj(&[1, 0], &[0.0, 0.0]);
        t.turns[1].subgoal = SubgoalId(1);
        assert!(matches!(
            log_prob(&p, &t.turns[1]),
            Err(PolicyError::InconsistentTurn { t: 1, .. })
        ));
        assert!(grad_log_prob(&p, &t.turns[1]).is_err());
    }

    #[test]
    fn head_rows_normalise() {
        let mut rng = stream(5, 0);
        let p = PolicyParams::random(Dims::new(3, 3, 4), 2.0, &mut rng);
        for s in 0..3 {
            let total: f64 = p.subgoal_probs(State(s)).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for o in 0..3 {
                let sw: f64 = p.switch_probs(State(s), SubgoalId(o)).iter().sum();
                let ac: f64 = p.action_probs(State(s), SubgoalId(o)).iter().sum();
                assert!((sw - 1.0).abs() < 1e-12 && (ac - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_of_uniform_two_way_row() {
        let p = PolicyParams::zeros(dims());
        let t = traj(&[1], &[0.0]);
        let g = grad_log_prob(&p, &t.turns[0]).unwrap();
        let off = p.dims.action_row(State(0), SubgoalId(0));
        assert_eq!(&g.action[off..off + 2], &[0.5, -0.5]);
        // no switch row at t = 0
        assert_eq!(g.switch.iter().map(|x| x.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn score_of_deterministic_head_vanishes() {
        let mut p = PolicyParams::zeros(dims());
        let off = p.dims.action_row(State(0), SubgoalId(0));
        p.action[off] = 50.0;
        let t = traj(&[1], &[0.0]);
        let g = grad_log_prob(&p, &t.turns[0]).unwrap();
        assert!(g.action[off].abs() < 1e-20 && g.action[off + 1].abs() < 1e-20);
    }

    #[test]
    fn score_matches_central_differences() {
        let mut rng = stream(9, 1);
        let p = PolicyParams::random(dims(), 1.0, &mut rng);
        let t = traj(&[1, 0, 1], &[0.0; 3]);
        let h = 1e-5;
        for turn in &t.turns {
            let g = grad_log_prob(&p, turn).unwrap();
            for i in 0..p.len() {
                let mut plus = p.clone();
                plus.set(i, p.get(i) + h);
                let mut minus = p.clone();
                minus.set(i, p.get(i) - h);
                let fd = (log_prob(&plus, turn).unwrap().total()
                    - log_prob(&minus, turn).unwrap().total())
                    / (2.0 * h);
                let an = g.get(i);
                let scale = an.abs().max(fd.abs());
                if scale > 0.0 {
                    assert!((an - fd).abs() / scale <= 1e-6, "coord {i}: {an} vs {fd}");
                }
            }
        }
    }

    fn optimal_params(env: &FetchChain, options: usize) -> PolicyParams {
        let mut p = PolicyParams::zeros(Dims::for_env(env, options));
        let d = p.dims;
        for s in 0..env.n_states() - 1 {
            let cell = env.decode(State(s)).unwrap();
            let best = match (cell.carrying, cell.position) {
                (false, p) if p + 1 == env.length() => PICKUP,
                (false, _) => RIGHT,
                (true, 0) => DROP,
                (true, _) => LEFT,
            };
            for o in 0..options {
                p.action[d.action_row(State(s), SubgoalId(o)) + best.0] = 20.0;
            }
        }
        p
    }

    #[test]
    fn rollout_single_turn_horizon() {
        let env = FetchChain::new(3, 8).unwrap();
        let p = PolicyParams::zeros(Dims::for_env(&env, 2));
        let t = rollout(&env, &p, 1, EpisodeKey::new(0, 0), 0.3).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.turns[0].switch, Switch::Switch);
        assert!(matches!(t.end, EpisodeEnd::Truncated { .. }));
        t.validate().unwrap();
    }

    #[test]
    fn rollout_optimal_params_reach_ten() {
        let env = FetchChain::new(3, 8).unwrap();
        let p = optimal_params(&env, 2);
        let t = rollout(&env, &p, 8, EpisodeKey::new(4, 2), 0.0).unwrap();
        assert!(t.is_terminal());
        assert!((t.raw_return() - 10.0).abs() < 1e-12);
        let g = rollout_with(&env, &p, 8, Sampling::Greedy, 0.0).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.raw_return(), 10.0);
    }

    #[test]
    fn rollout_is_deterministic_and_penalises_keeps() {
        let env = FetchChain::new(3, 8).unwrap();
        let mut rng = stream(2, 2);
        let p = PolicyParams::random(Dims::for_env(&env, 2), 1.0, &mut rng);
        let a = rollout(&env, &p, 8, EpisodeKey::new(5, 9), 0.3).unwrap();
        let b = rollout(&env, &p, 8, EpisodeKey::new(5, 9), 0.3).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        for turn in &a.turns {
            let expect = turn.raw_reward - if turn.switch == Switch::Keep { 0.3 } else { 0.0 };
            assert!((turn.reward - expect).abs() < 1e-15);
            let lp = log_prob(&p, turn).unwrap();
            let rec = turn.behavior.unwrap();
            assert!((lp.action - rec.action_logp).abs() < 1e-12);
            assert_eq!(lp.switch.is_some(), rec.switch_logp.is_some());
        }
    }
}
