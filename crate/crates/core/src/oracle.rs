//! Exact ground truth on enumerable environments and the statistical
//! harnesses built on it.
//!
//! Enumeration expands every `(q, o, a)` choice at every turn depth-first,
//! multiplying the factorised turn probabilities; with deterministic
//! transitions this yields every trajectory together with its probability.

use crate::critic::{FlatValues, ValueTables};
use crate::env::{EnvError, EnvModel, SUCCESS_REWARD};
use crate::episode::{
    returns_to_go, ActionId, BehaviorRecord, EpisodeEnd, State, SubgoalId, Switch, Trajectory,
    TurnRecord,
};
use crate::hae::{self, closed_form, GaeConfig, HaeError};
use crate::policy::{
    accumulate_score, rollout, switch_prob, Dims, GradTables, HeadWeights, PolicyError,
    PolicyParams,
};
use crate::rng::{stream, EpisodeKey};
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("enumeration would visit up to {bound} leaves, above the cap of {cap}")]
    CapExceeded { bound: u128, cap: u128 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Hae(#[from] HaeError),
    #[error("turn {t} was reached by {reached} of {attempts} sampled episodes, fewer than {wanted}")]
    Unreachable { t: usize, reached: usize, attempts: usize, wanted: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Default leaf cap for enumeration.
pub const DEFAULT_CAP: u128 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnumerationConfig {
    pub horizon: usize,
    /// KEEP penalty folded into the enumerated rewards.
    pub c_keep: f64,
    pub cap: u128,
}

impl EnumerationConfig {
    pub fn new(horizon: usize) -> Self {
        Self { horizon, c_keep: 0.0, cap: DEFAULT_CAP }
    }
}

/// Upper bound on the number of leaves: `|init| * (O A) * ((1 + O) A)^(H - 1)`.
pub fn leaf_bound(env: &dyn EnvModel, dims: Dims, horizon: usize) -> u128 {
    let first = (dims.options * dims.actions) as u128;
    let later = ((1 + dims.options) * dims.actions) as u128;
    let mut bound = env.initial_states().len() as u128 * first;
    for _ in 1..horizon.max(1) {
        bound = bound.saturating_mul(later);
    }
    bound
}

/// One `(q, o, a)` alternative at a node together with its probability.
struct Choice {
    switch: Switch,
    subgoal: SubgoalId,
    action: ActionId,
    prob: f64,
    behavior: BehaviorRecord,
}

fn choices(params: &PolicyParams, s: State, prev: Option<SubgoalId>) -> Vec<Choice> {
    let d = params.dims;
    let mut out = Vec::with_capacity((1 + d.options) * d.actions);
    let (switch_probs, beta) = match prev {
        None => (None, None),
        Some(p) => {
            let probs = params.switch_probs(s, p);
            let beta = probs[1];
            (Some(probs), Some(beta))
        }
    };
    let subgoal_probs = params.subgoal_probs(s);
    let push_actions = |out: &mut Vec<Choice>, switch: Switch, o: SubgoalId, head_prob: f64, sw_lp, sg_lp| {
        let action_probs = params.action_probs(s, o);
        for (a, &pa) in action_probs.iter().enumerate() {
            out.push(Choice {
                switch,
                subgoal: o,
                action: ActionId(a),
                prob: head_prob * pa,
                behavior: BehaviorRecord {
                    switch_logp: sw_lp,
                    subgoal_logp: sg_lp,
                    action_logp: pa.ln(),
                    beta,
                },
            });
        }
    };
    if let (Some(p), Some(sp)) = (prev, &switch_probs) {
        push_actions(&mut out, Switch::Keep, p, sp[0], Some(sp[0].ln()), None);
    }
    let p_switch = switch_probs.as_ref().map_or(1.0, |sp| sp[1]);
    let sw_lp = switch_probs.as_ref().map(|sp| sp[1].ln());
    for (o, &po) in subgoal_probs.iter().enumerate() {
        push_actions(&mut out, Switch::Switch, SubgoalId(o), p_switch * po, sw_lp, Some(po.ln()));
    }
    out
}

struct Walker<'a> {
    env: &'a dyn EnvModel,
    params: &'a PolicyParams,
    cfg: EnumerationConfig,
}

impl Walker<'_> {
    fn expand<F: FnMut(&Trajectory, f64)>(
        &self,
        traj: &mut Trajectory,
        state: State,
        prev: Option<SubgoalId>,
        prob: f64,
        only: Option<usize>,
        visit: &mut F,
    ) -> Result<u64, OracleError> {
        let t = traj.turns.len();
        let mut leaves = 0;
        for (i, choice) in choices(self.params, state, prev).into_iter().enumerate() {
            if only.is_some_and(|j| j != i) {
                continue;
            }
            let tr = self.env.step(state, choice.action)?;
            let penalty = if choice.switch == Switch::Keep { self.cfg.c_keep } else { 0.0 };
            traj.turns.push(TurnRecord {
                t,
                state,
                prev_subgoal: prev,
                switch: choice.switch,
                subgoal: choice.subgoal,
                subgoal_text: None,
                action: choice.action,
                reward: tr.reward - penalty,
                raw_reward: tr.reward,
                done: tr.done,
                behavior: Some(choice.behavior),
                format_valid: true,
            });
            let p = prob * choice.prob;
            if tr.done {
                traj.end = EpisodeEnd::Terminal;
                visit(traj, p);
                leaves += 1;
            } else if t + 1 >= self.cfg.horizon {
                traj.end = EpisodeEnd::Truncated { final_state: tr.next };
                visit(traj, p);
                leaves += 1;
            } else {
                leaves += self.expand(traj, tr.next, Some(choice.subgoal), p, None, visit)?;
            }
            traj.turns.pop();
        }
        Ok(leaves)
    }
}

fn check_cap(env: &dyn EnvModel, params: &PolicyParams, cfg: &EnumerationConfig) -> Result<(), OracleError> {
    let bound = leaf_bound(env, params.dims, cfg.horizon);
    if bound > cfg.cap {
        return Err(OracleError::CapExceeded { bound, cap: cfg.cap });
    }
    if params.dims.states != env.n_states() || params.dims.actions != env.n_actions() {
        return Err(OracleError::Invalid(format!(
            "policy dims {:?} do not match the environment ({} states, {} actions)",
            params.dims,
            env.n_states(),
            env.n_actions()
        )));
    }
    Ok(())
}

/// Calls `visit(trajectory, probability)` for every trajectory; returns the leaf count.
pub fn for_each_trajectory<F: FnMut(&Trajectory, f64)>(
    env: &dyn EnvModel,
    params: &PolicyParams,
    cfg: &EnumerationConfig,
    mut visit: F,
) -> Result<u64, OracleError> {
    check_cap(env, params, cfg)?;
    let walker = Walker { env, params, cfg: *cfg };
    let mut leaves = 0;
    for (s0, p0) in env.initial_states() {
        let mut traj = Trajectory { turns: Vec::with_capacity(cfg.horizon), end: EpisodeEnd::Terminal, seed: 0 };
        leaves += walker.expand(&mut traj, s0, None, p0, None, &mut visit)?;
    }
    Ok(leaves)
}

/// Parallel fold over all trajectories, split by initial state and first-turn
/// choice. Partial accumulators are combined in a fixed order, so results
/// do not depend on scheduling.
pub fn fold_trajectories<A, I, V, R>(
    env: &dyn EnvModel,
    params: &PolicyParams,
    cfg: &EnumerationConfig,
    init: I,
    visit: V,
    reduce: R,
) -> Result<A, OracleError>
where
    A: Send,
    I: Fn() -> A + Sync,
    V: Fn(&mut A, &Trajectory, f64) + Sync,
    R: Fn(A, A) -> A,
{
    check_cap(env, params, cfg)?;
    let walker = Walker { env, params, cfg: *cfg };
    let branches: Vec<(State, f64, usize)> = env
        .initial_states()
        .into_iter()
        .flat_map(|(s, p)| (0..choices(params, s, None).len()).map(move |i| (s, p, i)))
        .collect();
    let parts = branches
        .par_iter()
        .map(|&(s, p, i)| {
            let mut acc = init();
            let mut traj = Trajectory { turns: Vec::with_capacity(cfg.horizon), end: EpisodeEnd::Terminal, seed: 0 };
            walker.expand(&mut traj, s, None, p, Some(i), &mut |t: &Trajectory, w| visit(&mut acc, t, w))?;
            Ok(acc)
        })
        .collect::<Result<Vec<A>, OracleError>>()?;
    Ok(parts.into_iter().reduce(reduce).unwrap_or_else(init))
}

/// All trajectories with their probabilities.
#[derive(Debug, Clone)]
pub struct TrajectoryDistribution {
    pub items: Vec<(Trajectory, f64)>,
}

impl TrajectoryDistribution {
    pub fn total_probability(&self) -> f64 {
        self.items.iter().map(|(_, p)| p).sum()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Trajectory, f64)> + '_ {
        self.items.iter().map(|(t, p)| (t, *p))
    }
}

/// Materialises the full distribution; meant for small cases.
pub fn enumerate_trajectories(
    env: &dyn EnvModel,
    params: &PolicyParams,
    cfg: &EnumerationConfig,
) -> Result<TrajectoryDistribution, OracleError> {
    let mut items = Vec::new();
    for_each_trajectory(env, params, cfg, |t, p| items.push((t.clone(), p)))?;
    Ok(TrajectoryDistribution { items })
}

/// Exact conditional expected returns, occupancy-weighted over all turns at
/// which each context occurs. `None` marks contexts never visited.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleValues {
    pub states: usize,
    pub options: usize,
    /// `E[G_t | s_t = s, q_t = 1]`
    pub high: Vec<Option<f64>>,
    /// `E[G_t | s_t = s, o_t = o]`
    pub low: Vec<Option<f64>>,
    /// `E[G_t | s_t = s]`
    pub flat: Vec<Option<f64>>,
    /// `E[G_t | s_t = s, o_{t-1} = o, q_t = q]` for `t >= 1`, indexed `[s][o][q]`.
    pub switch_q: Vec<Option<f64>>,
    /// `E[G_t | s_t = s, o_{t-1} = o]` for `t >= 1`.
    pub switch_v: Vec<Option<f64>>,
    /// Expected number of visits of `(s, o)`.
    pub low_occupancy: Vec<f64>,
}

impl OracleValues {
    pub fn high(&self, s: State) -> Option<f64> {
        self.high[s.0]
    }

    pub fn low(&self, s: State, o: SubgoalId) -> Option<f64> {
        self.low[s.0 * self.options + o.0]
    }

    pub fn flat(&self, s: State) -> Option<f64> {
        self.flat[s.0]
    }

    pub fn q_switch(&self, s: State, o_prev: SubgoalId, q: Switch) -> Option<f64> {
        self.switch_q[(s.0 * self.options + o_prev.0) * 2 + q.index()]
    }

    pub fn v_switch(&self, s: State, o_prev: SubgoalId) -> Option<f64> {
        self.switch_v[s.0 * self.options + o_prev.0]
    }

    /// Two-head tables with undefined cells set to 0.
    pub fn tables(&self) -> ValueTables {
        ValueTables {
            states: self.states,
            options: self.options,
            high: self.high.iter().map(|v| v.unwrap_or(0.0)).collect(),
            low: self.low.iter().map(|v| v.unwrap_or(0.0)).collect(),
        }
    }

    pub fn flat_values(&self) -> FlatValues {
        FlatValues { values: self.flat.iter().map(|v| v.unwrap_or(0.0)).collect() }
    }
}

#[derive(Clone)]
struct Means {
    weight: Vec<f64>,
    total: Vec<f64>,
}

impl Means {
    fn new(n: usize) -> Self {
        Self { weight: vec![0.0; n], total: vec![0.0; n] }
    }

    fn add(&mut self, i: usize, w: f64, x: f64) {
        self.weight[i] += w;
        self.total[i] += w * x;
    }

    fn merge(mut self, other: Self) -> Self {
        self.weight.iter_mut().zip(other.weight).for_each(|(a, b)| *a += b);
        self.total.iter_mut().zip(other.total).for_each(|(a, b)| *a += b);
        self
    }

    fn finish(&self) -> Vec<Option<f64>> {
        self.weight
            .iter()
            .zip(&self.total)
            .map(|(&w, &x)| (w > 0.0).then(|| x / w))
            .collect()
    }
}

/// Exact `V_high`, `V_low`, `V_flat` and switching values under `params`.
///
/// Returns are taken without bootstrapping; with truncation and states that
/// do not encode time these are averages over time steps rather than Markov
/// values.
pub fn oracle_values(
    env: &dyn EnvModel,
    params: &PolicyParams,
    cfg: &EnumerationConfig,
    gamma: f64,
) -> Result<OracleValues, OracleError> {
    let (s_n, o_n) = (env.n_states(), params.dims.options);
    let init = || (Means::new(s_n), Means::new(s_n * o_n), Means::new(s_n), Means::new(s_n * o_n * 2), Means::new(s_n * o_n));
    let acc = fold_trajectories(
        env,
        params,
        cfg,
        init,
        |acc, traj, p| {
            let g = returns_to_go(traj, gamma);
            for (t, turn) in traj.turns.iter().enumerate() {
                let s = turn.state.0;
                if turn.switch.is_switch() {
                    acc.0.add(s, p, g[t]);
                }
                acc.1.add(s * o_n + turn.subgoal.0, p, g[t]);
                acc.2.add(s, p, g[t]);
                if t > 0 {
                    let prev = traj.turns[t - 1].subgoal.0;
                    acc.3.add((s * o_n + prev) * 2 + turn.switch.index(), p, g[t]);
                    acc.4.add(s * o_n + prev, p, g[t]);
                }
            }
        },
        |a, b| (a.0.merge(b.0), a.1.merge(b.1), a.2.merge(b.2), a.3.merge(b.3), a.4.merge(b.4)),
    )?;
    Ok(OracleValues {
        states: s_n,
        options: o_n,
        high: acc.0.finish(),
        low: acc.1.finish(),
        flat: acc.2.finish(),
        switch_q: acc.3.finish(),
        switch_v: acc.4.finish(),
        low_occupancy: acc.1.weight.clone(),
    })
}

/// Exact expectation of `sum_t gamma^t value(turn)` by memoised recursion
/// over `(state, previous subgoal, turn index)`; independent of enumeration.
pub fn exact_expectation(
    env: &dyn EnvModel,
    params: &PolicyParams,
    horizon: usize,
    gamma: f64,
    value: impl Fn(f64, bool, Switch) -> f64,
) -> Result<f64, OracleError> {
    let d = params.dims;
    let slots = d.options + 1;
    let mut memo: Vec<Option<f64>> = vec![None; env.n_states() * slots * horizon.max(1)];
    struct Ctx<'a, V> {
        env: &'a dyn EnvModel,
        params: &'a PolicyParams,
        horizon: usize,
        gamma: f64,
        value: V,
        slots: usize,
    }
    fn rec<V: Fn(f64, bool, Switch) -> f64>(
        ctx: &Ctx<V>,
        memo: &mut Vec<Option<f64>>,
        s: State,
        prev: Option<SubgoalId>,
        t: usize,
    ) -> Result<f64, OracleError> {
        let key = (s.0 * ctx.slots + prev.map_or(ctx.slots - 1, |o| o.0)) * ctx.horizon + t;
        if let Some(v) = memo[key] {
            return Ok(v);
        }
        let mut total = 0.0;
        for c in choices(ctx.params, s, prev) {
            let tr = ctx.env.step(s, c.action)?;
            let mut v = (ctx.value)(tr.reward, tr.done, c.switch);
            if !tr.done && t + 1 < ctx.horizon {
                v += ctx.gamma * rec(ctx, memo, tr.next, Some(c.subgoal), t + 1)?;
            }
            total += c.prob * v;
        }
        memo[key] = Some(total);
        Ok(total)
    }
    let ctx = Ctx { env, params, horizon: horizon.max(1), gamma, value, slots };
    let mut total = 0.0;
    for (s0, p0) in env.initial_states() {
        total += p0 * rec(&ctx, &mut memo, s0, None, 0)?;
    }
    Ok(total)
}

/// `J(theta)`: expected discounted shaped return.
pub fn exact_objective(
    env: &dyn EnvModel,
    params: &PolicyParams,
    cfg: &EnumerationConfig,
    gamma: f64,
) -> Result<f64, OracleError> {
    let c_keep = cfg.c_keep;
    exact_expectation(env, params, cfg.horizon, gamma, |r, _, q| {
        r - if q == Switch::Keep { c_keep } else { 0.0 }
    })
}

/// Probability of ending an episode with the success reward.
pub fn success_probability(
    env: &dyn EnvModel,
    params: &PolicyParams,
    horizon: usize,
) -> Result<f64, OracleError> {
    exact_expectation(env, params, horizon, 1.0, |r, done, _| {
        if done && r >= SUCCESS_REWARD {
            1.0
        } else {
            0.0
        }
    })
}

/// Exact `grad J = sum_tau P(tau) (sum_t score_t) R(tau)`.
pub fn oracle_gradient(
    env: &dyn EnvModel,
    params: &PolicyParams,
    cfg: &EnumerationConfig,
    gamma: f64,
) -> Result<GradTables, OracleError> {
    weighted_score_sum(env, params, cfg, |traj| traj.discounted_return(gamma))
}

/// `E[sum_t score_t]`, which is the zero table.
pub fn expected_score(
    env: &dyn EnvModel,
    params: &PolicyParams,
    cfg: &EnumerationConfig,
) -> Result<GradTables, OracleError> {
    weighted_score_sum(env, params, cfg, |_| 1.0)
}

fn weighted_score_sum(
    env: &dyn EnvModel,
    params: &PolicyParams,
    cfg: &EnumerationConfig,
    weight: impl Fn(&Trajectory) -> f64 + Sync,
) -> Result<GradTables, OracleError> {
    let dims = params.dims;
    let acc = fold_trajectories(
        env,
        params,
        cfg,
        || (GradTables::zeros(dims), None::<PolicyError>),
        |acc, traj, p| {
            let w = p * weight(traj);
            for turn in &traj.turns {
                if let Err(e) = accumulate_score(params, turn, HeadWeights::uniform(w), &mut acc.0) {
                    acc.1.get_or_insert(e);
                }
            }
        },
        |mut a, b| {
            a.0.add_assign(&b.0);
            (a.0, a.1.or(b.1))
        },
    )?;
    match acc.1 {
        Some(e) => Err(e.into()),
        None => Ok(acc.0),
    }
}

/// Per-coordinate Monte Carlo mean and standard error of a gradient estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct McGradient {
    pub mean: GradTables,
    pub se: GradTables,
    pub samples: usize,
}

/// The HAE policy-gradient estimate of one trajectory: switch scores times
/// switching advantages, subgoal scores (switch turns only) times planning
/// advantages, action scores times execution advantages.
pub fn hae_gradient(
    traj: &Trajectory,
    params: &PolicyParams,
    tables: &ValueTables,
    cfg: &GaeConfig,
) -> Result<GradTables, OracleError> {
    weighted_hae_gradient(traj, params, tables, cfg, false)
}

/// [`hae_gradient`] with turn `t` scaled by `gamma^t`. For `gamma < 1` this is
/// the form whose expectation is the gradient of the discounted objective;
/// the unscaled form matches it only at `gamma = 1`.
pub fn hae_gradient_discounted(
    traj: &Trajectory,
    params: &PolicyParams,
    tables: &ValueTables,
    cfg: &GaeConfig,
) -> Result<GradTables, OracleError> {
    weighted_hae_gradient(traj, params, tables, cfg, true)
}

fn weighted_hae_gradient(
    traj: &Trajectory,
    params: &PolicyParams,
    tables: &ValueTables,
    cfg: &GaeConfig,
    discounted: bool,
) -> Result<GradTables, OracleError> {
    let adv = hae::estimate(traj, tables, None, Some(params), cfg)?;
    let mut grad = GradTables::zeros(params.dims);
    let mut scale = 1.0;
    for (t, turn) in traj.turns.iter().enumerate() {
        let weights = HeadWeights {
            switch: scale * adv.switch[t].unwrap_or(0.0),
            subgoal: scale * adv.high_at_turn(t).unwrap_or(0.0),
            action: scale * adv.low[t],
        };
        if discounted {
            scale *= cfg.gamma;
        }
        accumulate_score(params, turn, weights, &mut grad)?;
    }
    Ok(grad)
}

/// Exact mean and per-coordinate variance of the single-episode
/// [`hae_gradient`] under the enumerated distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMoments {
    pub mean: GradTables,
    pub variance: GradTables,
}

impl EstimatorMoments {
    /// Standard error of an `n`-sample mean.
    pub fn standard_error(&self, n: usize) -> GradTables {
        let mut se = self.variance.clone();
        se.iter_mut().for_each(|v| *v = (v.max(0.0) / n as f64).sqrt());
        se
    }
}

pub fn estimator_moments(
    env: &dyn EnvModel,
    params: &PolicyParams,
    tables: &ValueTables,
    gae: &GaeConfig,
    cfg: &EnumerationConfig,
) -> Result<EstimatorMoments, OracleError> {
    let dims = params.dims;
    let (first, second, err) = fold_trajectories(
        env,
        params,
        cfg,
        || (GradTables::zeros(dims), GradTables::zeros(dims), None::<OracleError>),
        |acc, traj, p| match hae_gradient(traj, params, tables, gae) {
            Ok(g) => {
                for ((m, s), x) in acc.0.iter_mut().zip(acc.1.iter_mut()).zip(g.iter()) {
                    *m += p * x;
                    *s += p * x * x;
                }
            }
            Err(e) => {
                acc.2.get_or_insert(e);
            }
        },
        |mut a, b| {
            a.0.add_assign(&b.0);
            a.1.add_assign(&b.1);
            (a.0, a.1, a.2.or(b.2))
        },
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    let mut variance = second;
    variance.iter_mut().zip(first.iter()).for_each(|(v, m)| *v -= m * m);
    Ok(EstimatorMoments { mean: first, variance })
}

/// Sampling settings shared by the Monte Carlo harnesses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub horizon: usize,
    pub c_keep: f64,
    pub seed: u64,
}

/// Mean and standard error of [`hae_gradient`] over `n` on-policy rollouts.
pub fn mc_gradient_hae(
    env: &dyn EnvModel,
    params: &PolicyParams,
    tables: &ValueTables,
    cfg: &GaeConfig,
    n: usize,
    sampling: &SampleConfig,
) -> Result<McGradient, OracleError> {
    if n == 0 {
        return Err(OracleError::Invalid("need at least one sample".into()));
    }
    let dims = params.dims;
    let chunk = 1024;
    let parts = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| -> Result<(GradTables, GradTables), OracleError> {
            let mut sum = GradTables::zeros(dims);
            let mut sq = GradTables::zeros(dims);
            for i in c * chunk..((c + 1) * chunk).min(n) {
                let key = EpisodeKey::new(sampling.seed, i as u64);
                let traj = rollout(env, params, sampling.horizon, key, sampling.c_keep)?;
                let g = hae_gradient(&traj, params, tables, cfg)?;
                for ((s, q), x) in sum.iter_mut().zip(sq.iter_mut()).zip(g.iter()) {
                    *s += x;
                    *q += x * x;
                }
            }
            Ok((sum, sq))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut sum = GradTables::zeros(dims);
    let mut sq = GradTables::zeros(dims);
    for (s, q) in parts {
        sum.add_assign(&s);
        sq.add_assign(&q);
    }
    let nf = n as f64;
    let mut mean = sum;
    mean.scale(1.0 / nf);
    let mut se = GradTables::zeros(dims);
    for ((e, m), q) in se.iter_mut().zip(mean.iter()).zip(sq.iter()) {
        let var = if n > 1 { ((q - nf * m * m) / (nf - 1.0)).max(0.0) } else { 0.0 };
        *e = (var / nf).sqrt();
    }
    Ok(McGradient { mean, se, samples: n })
}

/// Outcome of comparing a Monte Carlo gradient with the exact one.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct UnbiasedReport {
    pub coordinates: usize,
    pub samples: usize,
    /// Largest `|mean - exact| / SE` over coordinates with `SE > 0`.
    pub max_z: f64,
    /// Coordinates outside `tolerance_se * SE` (or `1e-9` when `SE == 0`).
    pub failures: usize,
    pub tolerance_se: f64,
}

impl UnbiasedReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares using the sample standard errors of `mc`.
pub fn compare_gradients(mc: &McGradient, exact: &GradTables, tolerance_se: f64) -> UnbiasedReport {
    compare_with_se(mc, &mc.se, exact, tolerance_se)
}

/// Compares using externally supplied standard errors, e.g. from
/// [`EstimatorMoments::standard_error`]. Sample errors understate the spread
/// on rarely visited coordinates, where only a handful of episodes contribute.
pub fn compare_with_se(mc: &McGradient, se: &GradTables, exact: &GradTables, tolerance_se: f64) -> UnbiasedReport {
    let mut max_z: f64 = 0.0;
    let mut failures = 0;
    for ((m, s), e) in mc.mean.iter().zip(se.iter()).zip(exact.iter()) {
        let diff = (m - e).abs();
        if *s > 0.0 {
            max_z = max_z.max(diff / s);
            if diff > tolerance_se * s {
                failures += 1;
            }
        } else if diff > 1e-9 {
            failures += 1;
        }
    }
    UnbiasedReport { coordinates: exact.len(), samples: mc.samples, max_z, failures, tolerance_se }
}

/// Sample variances of the execution and flat advantages at one turn index.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct VarianceReport {
    pub t: usize,
    pub samples: usize,
    pub attempts: usize,
    pub var_low: f64,
    pub var_flat: f64,
    /// 95% bootstrap intervals.
    pub ci_low: (f64, f64),
    pub ci_flat: (f64, f64),
    /// Paired interval for `Var(A_low) - Var(A_flat)`.
    pub ci_diff: (f64, f64),
}

impl VarianceReport {
    /// Upper end of the paired difference interval is at most 0.
    pub fn low_not_larger(&self) -> bool {
        self.ci_diff.1 <= 0.0
    }

    /// The two marginal intervals intersect.
    pub fn overlapping(&self) -> bool {
        self.ci_low.0 <= self.ci_flat.1 && self.ci_flat.0 <= self.ci_low.1
    }
}

fn sample_variance(xs: &[f64], idx: impl Iterator<Item = usize> + Clone) -> f64 {
    let n = idx.clone().count() as f64;
    let mean = idx.clone().map(|i| xs[i]).sum::<f64>() / n;
    idx.map(|i| (xs[i] - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn percentile_interval(mut xs: Vec<f64>) -> (f64, f64) {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let at = |q: f64| xs[((q * (n - 1) as f64).round() as usize).min(n - 1)];
    (at(0.025), at(0.975))
}

/// Draws on-policy episodes until `n` of them reach turn `t`, then compares
/// `Var(A_low_t)` with `Var(A_flat_t)` using `bootstrap` paired resamples.
#[allow(clippy::too_many_arguments)]
pub fn variance_report(
    env: &dyn EnvModel,
    params: &PolicyParams,
    tables: &ValueTables,
    flat: &FlatValues,
    cfg: &GaeConfig,
    t: usize,
    n: usize,
    bootstrap: usize,
    sampling: &SampleConfig,
) -> Result<VarianceReport, OracleError> {
    if n < 2 || bootstrap == 0 {
        return Err(OracleError::Invalid("need n >= 2 samples and at least one bootstrap resample".into()));
    }
    let max_attempts = n.saturating_mul(1000);
    let mut low = Vec::with_capacity(n);
    let mut flat_adv = Vec::with_capacity(n);
    let mut attempts = 0;
    while low.len() < n && attempts < max_attempts {
        let key = EpisodeKey::new(sampling.seed, attempts as u64);
        attempts += 1;
        let traj = rollout(env, params, sampling.horizon, key, sampling.c_keep)?;
        if traj.len() <= t {
            continue;
        }
        let adv = hae::estimate(&traj, tables, Some(flat), Some(params), cfg)?;
        low.push(adv.low[t]);
        flat_adv.push(adv.flat.expect("flat values supplied")[t]);
    }
    if low.len() < n {
        return Err(OracleError::Unreachable { t, reached: low.len(), attempts, wanted: n });
    }
    let all = 0..n;
    let var_low = sample_variance(&low, all.clone());
    let var_flat = sample_variance(&flat_adv, all);
    let mut rng = stream(sampling.seed, 0x5eed_0000 + t as u64);
    let mut boot_low = Vec::with_capacity(bootstrap);
    let mut boot_flat = Vec::with_capacity(bootstrap);
    let mut boot_diff = Vec::with_capacity(bootstrap);
    let mut idx = vec![0usize; n];
    for _ in 0..bootstrap {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        let vl = sample_variance(&low, idx.iter().copied());
        let vf = sample_variance(&flat_adv, idx.iter().copied());
        boot_low.push(vl);
        boot_flat.push(vf);
        boot_diff.push(vl - vf);
    }
    Ok(VarianceReport {
        t,
        samples: n,
        attempts,
        var_low,
        var_flat,
        ci_low: percentile_interval(boot_low),
        ci_flat: percentile_interval(boot_flat),
        ci_diff: percentile_interval(boot_diff),
    })
}

/// Exact variances of `A_low_t` and `A_flat_t` over episodes that reach
/// turn `t` and end by termination.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct ExactVariances {
    pub t: usize,
    /// Probability of reaching `t` in a terminated episode.
    pub reach: f64,
    pub var_low: f64,
    pub var_flat: f64,
}

pub fn exact_advantage_variances(
    env: &dyn EnvModel,
    params: &PolicyParams,
    tables: &ValueTables,
    flat: &FlatValues,
    gae: &GaeConfig,
    cfg: &EnumerationConfig,
) -> Result<Vec<ExactVariances>, OracleError> {
    let h = cfg.horizon;
    // per t: [weight, sum low, sum low^2, sum flat, sum flat^2]
    let (moments, err) = fold_trajectories(
        env,
        params,
        cfg,
        || (vec![[0.0f64; 5]; h], None::<OracleError>),
        |acc, traj, p| {
            if !traj.is_terminal() {
                return;
            }
            match hae::estimate(traj, tables, Some(flat), Some(params), gae) {
                Ok(adv) => {
                    let fl = adv.flat.as_ref().expect("flat values supplied");
                    for t in 0..traj.len() {
                        let m = &mut acc.0[t];
                        let (l, f) = (adv.low[t], fl[t]);
                        m[0] += p;
                        m[1] += p * l;
                        m[2] += p * l * l;
                        m[3] += p * f;
                        m[4] += p * f * f;
                    }
                }
                Err(e) => {
                    acc.1.get_or_insert(e.into());
                }
            }
        },
        |mut a, b| {
            for (x, y) in a.0.iter_mut().zip(b.0) {
                x.iter_mut().zip(y).for_each(|(u, v)| *u += v);
            }
            (a.0, a.1.or(b.1))
        },
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(moments
        .iter()
        .enumerate()
        .filter(|(_, m)| m[0] > 0.0)
        .map(|(t, m)| {
            let w = m[0];
            ExactVariances {
                t,
                reach: w,
                var_low: m[2] / w - (m[1] / w).powi(2),
                var_flat: m[4] / w - (m[3] / w).powi(2),
            }
        })
        .collect())
}

/// Shape of the random trajectories used by [`telescope_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomTrajectorySpec {
    pub max_len: usize,
    pub states: usize,
    pub options: usize,
    pub actions: usize,
}

impl Default for RandomTrajectorySpec {
    fn default() -> Self {
        Self { max_len: 12, states: 6, options: 3, actions: 3 }
    }
}

/// A random well-formed trajectory: random length, switch pattern (first
/// turn switches), subgoals, states, rewards, terminal or truncated end, and
/// behavior switch probabilities.
pub fn random_trajectory<R: Rng + ?Sized>(rng: &mut R, spec: &RandomTrajectorySpec) -> Trajectory {
    let len = rng.random_range(1..=spec.max_len.max(1));
    let mut turns = Vec::with_capacity(len);
    let mut prev: Option<SubgoalId> = None;
    let options: Vec<usize> = (0..spec.options).collect();
    for t in 0..len {
        let switch = if t == 0 || rng.random_bool(0.4) { Switch::Switch } else { Switch::Keep };
        let subgoal = match (switch, prev) {
            (Switch::Keep, Some(o)) => o,
            _ => SubgoalId(*options.choose(rng).expect("at least one option")),
        };
        let reward = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-2.0..5.0) };
        let mut turn = TurnRecord::new(
            t,
            State(rng.random_range(0..spec.states)),
            prev,
            switch,
            subgoal,
            ActionId(rng.random_range(0..spec.actions)),
            reward,
        );
        turn.behavior = Some(BehaviorRecord {
            switch_logp: None,
            subgoal_logp: None,
            action_logp: 0.0,
            beta: (t > 0).then(|| rng.random_range(0.0..=1.0)),
        });
        turns.push(turn);
        prev = Some(subgoal);
    }
    let end = if rng.random_bool(0.5) {
        turns[len - 1].done = true;
        EpisodeEnd::Terminal
    } else {
        EpisodeEnd::Truncated { final_state: State(rng.random_range(0..spec.states)) }
    };
    Trajectory { turns, end, seed: 0 }
}

/// Random two-head and flat tables with entries in `[-10, 10)`.
pub fn random_tables<R: Rng + ?Sized>(rng: &mut R, states: usize, options: usize) -> (ValueTables, FlatValues) {
    let mut v = ValueTables::zeros(states, options);
    v.high.iter_mut().chain(v.low.iter_mut()).for_each(|x| *x = rng.random_range(-10.0..10.0));
    let flat = FlatValues { values: (0..states).map(|_| rng.random_range(-10.0..10.0)).collect() };
    (v, flat)
}

/// Maximum deviations between the `lambda = 1` estimators and their closed forms.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TelescopeReport {
    pub trials: usize,
    pub max_low: f64,
    pub max_high: f64,
    pub max_switch: f64,
    pub max_flat: f64,
    pub tolerance: f64,
}

impl TelescopeReport {
    pub fn passed(&self) -> bool {
        [self.max_low, self.max_high, self.max_switch, self.max_flat]
            .iter()
            .all(|&d| d <= self.tolerance)
    }
}

/// Checks on random trajectories and tables (random `gamma` in `(0, 1]`):
/// execution advantages against the segment-truncated telescoped sum,
/// planning advantages against `G_b - V_high(s_b)`, flat advantages against
/// `G_t - V_flat(s_t)`, and switching advantages against
/// `Q(q) - [beta Q(1) + (1 - beta) Q(0)]` with `Q(1) = V_high(s)`,
/// `Q(0) = V_low(s, o_prev)`.
pub fn telescope_check(trials: usize, seed: u64, spec: &RandomTrajectorySpec) -> Result<TelescopeReport, OracleError> {
    let mut rng = stream(seed, 0x7e1e);
    let mut report = TelescopeReport { trials, max_low: 0.0, max_high: 0.0, max_switch: 0.0, max_flat: 0.0, tolerance: 1e-10 };
    for _ in 0..trials {
        let traj = random_trajectory(&mut rng, spec);
        let (tables, flat) = random_tables(&mut rng, spec.states, spec.options);
        let gamma = if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.05..1.0) };
        let cfg = GaeConfig::monte_carlo(gamma);
        let adv = hae::estimate(&traj, &tables, Some(&flat), None, &cfg)?;
        let flat_adv = adv.flat.as_ref().expect("flat values supplied");
        for t in 0..traj.len() {
            let low = closed_form::low(&traj, &tables, gamma, t)?;
            report.max_low = report.max_low.max((adv.low[t] - low).abs());
            let f = closed_form::flat(&traj, &flat, gamma, t);
            report.max_flat = report.max_flat.max((flat_adv[t] - f).abs());
            if t > 0 {
                let turn = &traj.turns[t];
                let prev = traj.turns[t - 1].subgoal;
                let beta = turn.behavior.and_then(|b| b.beta).expect("random trajectories record beta");
                let q1 = tables.high(turn.state);
                let q0 = tables.low(turn.state, prev);
                let realised = if turn.switch.is_switch() { q1 } else { q0 };
                let expected = realised - (beta * q1 + (1.0 - beta) * q0);
                let got = adv.switch[t].expect("switch advantage for t >= 1");
                report.max_switch = report.max_switch.max((got - expected).abs());
            }
        }
        for k in 0..adv.high.len() {
            let h = closed_form::high(&traj, &tables, gamma, k)?;
            report.max_high = report.max_high.max((adv.high[k] - h).abs());
        }
    }
    Ok(report)
}

/// Switching advantages from exact tables compared with the brute-force
/// `Q_switch(s, o_prev, q) - V_switch(s, o_prev)` at every reachable context.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SwitchExactnessReport {
    pub contexts: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl SwitchExactnessReport {
    pub fn passed(&self) -> bool {
        self.contexts > 0 && self.max_deviation <= self.tolerance
    }
}

pub fn switch_exactness(params: &PolicyParams, values: &OracleValues) -> SwitchExactnessReport {
    let tables = values.tables();
    let mut report = SwitchExactnessReport { contexts: 0, max_deviation: 0.0, tolerance: 1e-10 };
    for s in 0..values.states {
        for o in 0..values.options {
            let (s, o) = (State(s), SubgoalId(o));
            let Some(v) = values.v_switch(s, o) else { continue };
            let beta = switch_prob(params, s, o);
            for q in [Switch::Keep, Switch::Switch] {
                let Some(qv) = values.q_switch(s, o, q) else { continue };
                let estimate = (q.as_f64() - beta) * (tables.high(s) - tables.low(s, o));
                report.contexts += 1;
                report.max_deviation = report.max_deviation.max((estimate - (qv - v)).abs());
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FetchChain, OneStep};
    use crate::policy::Head;

    fn random_params(dims: Dims, seed: u64) -> PolicyParams {
        PolicyParams::random(dims, 1.0, &mut stream(seed, 1))
    }

    #[test]
    fn one_step_leaves_and_probabilities() {
        let env = OneStep::constant(3, 10.0).unwrap();
        let p = PolicyParams::zeros(Dims::for_env(&env, 2));
        let dist = enumerate_trajectories(&env, &p, &EnumerationConfig::new(1)).unwrap();
        assert_eq!(dist.len(), 2 * 3);
        for (traj, prob) in dist.iter() {
            assert!((prob - 1.0 / 6.0).abs() < 1e-15);
            assert_eq!(traj.len(), 1);
        }
        let values = oracle_values(&env, &p, &EnumerationConfig::new(1), 0.9).unwrap();
        assert_eq!(values.high(State(0)), Some(10.0));
        assert_eq!(values.low(State(0), SubgoalId(1)), Some(10.0));
        assert_eq!(values.flat(State(1)), None);
    }

    #[test]
    fn fetchchain_leaf_count_matches_branching_product() {
        let env = FetchChain::new(3, 4).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 3);
        let cfg = EnumerationConfig::new(4);
        let mut total = 0.0;
        let leaves = for_each_trajectory(&env, &p, &cfg, |t, prob| {
            t.validate().unwrap();
            total += prob;
        })
        .unwrap();
        assert_eq!(leaves as u128, 8 * 12u128.pow(3));
        assert_eq!(leaf_bound(&env, p.dims, 4), 8 * 12u128.pow(3));
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let env = FetchChain::new(3, 8).unwrap();
        let p = PolicyParams::zeros(Dims::for_env(&env, 2));
        let cfg = EnumerationConfig { cap: 1000, ..EnumerationConfig::new(8) };
        assert!(matches!(for_each_trajectory(&env, &p, &cfg, |_, _| {}), Err(OracleError::CapExceeded { .. })));
    }

    #[test]
    fn enumerated_log_probs_match_stored_behavior() {
        let env = FetchChain::new(3, 3).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 5);
        let dist = enumerate_trajectories(&env, &p, &EnumerationConfig::new(3)).unwrap();
        for (traj, prob) in dist.iter() {
            let stored: f64 = traj.turns.iter().map(|t| {
                let b = t.behavior.unwrap();
                b.switch_logp.unwrap_or(0.0) + b.subgoal_logp.unwrap_or(0.0) + b.action_logp
            }).sum();
            let live: f64 = traj.turns.iter().map(|t| crate::policy::log_prob(&p, t).unwrap().total()).sum();
            assert!((stored - prob.ln()).abs() < 1e-10);
            assert!((live - prob.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn enumerated_objective_matches_recursion() {
        let env = FetchChain::new(2, 5).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 7);
        let cfg = EnumerationConfig { c_keep: 0.3, ..EnumerationConfig::new(5) };
        let mut j = 0.0;
        for_each_trajectory(&env, &p, &cfg, |t, prob| j += prob * t.discounted_return(0.9)).unwrap();
        let exact = exact_objective(&env, &p, &cfg, 0.9).unwrap();
        assert!((j - exact).abs() < 1e-10, "{j} vs {exact}");
        let par = fold_trajectories(&env, &p, &cfg, || 0.0, |a, t, prob| *a += prob * t.discounted_return(0.9), |a, b| a + b).unwrap();
        assert!((par - exact).abs() < 1e-10);
    }

    #[test]
    fn score_identity_holds_exactly() {
        let env = FetchChain::timed(2, 4).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 11);
        let g = expected_score(&env, &p, &EnumerationConfig::new(4)).unwrap();
        assert!(g.max_abs() < 1e-12, "{}", g.max_abs());
    }

    #[test]
    fn oracle_gradient_matches_finite_differences() {
        let env = FetchChain::new(2, 4).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 13);
        let cfg = EnumerationConfig { c_keep: 0.2, ..EnumerationConfig::new(4) };
        let g = oracle_gradient(&env, &p, &cfg, 0.95).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.set(i, p.get(i) + h);
            let mut minus = p.clone();
            minus.set(i, p.get(i) - h);
            let fd = (exact_objective(&env, &plus, &cfg, 0.95).unwrap()
                - exact_objective(&env, &minus, &cfg, 0.95).unwrap())
                / (2.0 * h);
            assert!((fd - g.get(i)).abs() <= 1e-6 * fd.abs().max(g.get(i).abs()).max(1.0), "coord {i}: {fd} vs {}", g.get(i));
        }
    }

    #[test]
    fn zero_reward_env_has_zero_gradient() {
        let env = OneStep::constant(3, 0.0).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 1);
        let g = oracle_gradient(&env, &p, &EnumerationConfig::new(1), 1.0).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn constant_reward_shift_is_linear() {
        // adding c to every reward adds c * grad E[sum gamma^t] to grad J
        let env = FetchChain::new(2, 4).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 17);
        let cfg = EnumerationConfig::new(4);
        let gamma = 0.9;
        let c = 1.7;
        let base = oracle_gradient(&env, &p, &cfg, gamma).unwrap();
        let length = weighted_score_sum(&env, &p, &cfg, |t| (0..t.len()).map(|i| gamma.powi(i as i32)).sum()).unwrap();
        let shifted = weighted_score_sum(&env, &p, &cfg, |t| {
            t.turns.iter().enumerate().map(|(i, turn)| gamma.powi(i as i32) * (turn.reward + c)).sum()
        })
        .unwrap();
        for i in 0..p.len() {
            assert!((shifted.get(i) - base.get(i) - c * length.get(i)).abs() < 1e-10);
        }
    }

    #[test]
    fn high_value_mixes_low_values_by_subgoal_policy() {
        let env = FetchChain::timed(2, 5).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 19);
        let v = oracle_values(&env, &p, &EnumerationConfig::new(5), 0.9).unwrap();
        let mut checked = 0;
        for s in 0..env.n_states() {
            let Some(high) = v.high(State(s)) else { continue };
            let probs = p.subgoal_probs(State(s));
            let mix: f64 = (0..2).map(|o| probs[o] * v.low(State(s), SubgoalId(o)).unwrap()).sum();
            assert!((high - mix).abs() < 1e-10);
            // V_flat is the occupancy mixture of V_low
            let occ: Vec<f64> = (0..2).map(|o| v.low_occupancy[s * 2 + o]).collect();
            let flat_mix: f64 = (0..2)
                .filter(|&o| occ[o] > 0.0)
                .map(|o| occ[o] * v.low(State(s), SubgoalId(o)).unwrap())
                .sum::<f64>()
                / occ.iter().sum::<f64>();
            assert!((v.flat(State(s)).unwrap() - flat_mix).abs() < 1e-10);
            checked += 1;
        }
        assert!(checked > 3);
    }

    #[test]
    fn switching_is_exact_on_timed_chain() {
        let env = FetchChain::timed(2, 5).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 23);
        let v = oracle_values(&env, &p, &EnumerationConfig::new(5), 0.95).unwrap();
        let report = switch_exactness(&p, &v);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn success_probability_of_optimal_and_uniform() {
        let env = FetchChain::new(2, 4).unwrap();
        let uniform = PolicyParams::zeros(Dims::for_env(&env, 2));
        let ps = success_probability(&env, &uniform, 4).unwrap();
        let mut hits = 0.0;
        for_each_trajectory(&env, &uniform, &EnumerationConfig::new(4), |t, p| {
            if t.is_terminal() && t.raw_return() >= 9.0 {
                hits += p;
            }
        })
        .unwrap();
        assert!((ps - hits).abs() < 1e-12);
        assert!(ps > 0.0 && ps < 1.0);
    }

    #[test]
    fn telescope_identities_hold() {
        let report = telescope_check(500, 3, &RandomTrajectorySpec::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn hae_gradient_is_exactly_unbiased_with_true_values() {
        let env = FetchChain::timed(2, 4).unwrap();
        let p = random_params(Dims::for_env(&env, 2), 29);
        let cfg = EnumerationConfig::new(4);
        for gamma in [1.0, 0.8] {
            let v = oracle_values(&env, &p, &cfg, gamma).unwrap();
            let tables = v.tables();
            let gae = GaeConfig::monte_carlo(gamma);
            let exact = oracle_gradient(&env, &p, &cfg, gamma).unwrap();
            let mut discounted = GradTables::zeros(p.dims);
            for_each_trajectory(&env, &p, &cfg, |t, prob| {
                let mut g = hae_gradient_discounted(t, &p, &tables, &gae).unwrap();
                g.scale(prob);
                discounted.add_assign(&g);
            })
            .unwrap();
            let plain = estimator_moments(&env, &p, &tables, &gae, &cfg).unwrap().mean;
            let gap = |g: &GradTables| g.iter().zip(exact.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap(&discounted) < 1e-12, "gamma {gamma}: {}", gap(&discounted));
            if gamma == 1.0 {
                assert!(gap(&plain) < 1e-12);
            } else {
                assert!(gap(&plain) > 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_single_sample_gradient_has_zero_se() {
        let env = OneStep::constant(2, 1.0).unwrap();
        let mut p = PolicyParams::zeros(Dims::for_env(&env, 2));
        p.head_mut(Head::Subgoal)[0] = 60.0;
        p.head_mut(Head::Action)[0] = 60.0;
        p.head_mut(Head::Action)[2] = 60.0;
        let tables = ValueTables::zeros(2, 2);
        let sampling = SampleConfig { horizon: 1, c_keep: 0.0, seed: 1 };
        let mc = mc_gradient_hae(&env, &p, &tables, &GaeConfig::monte_carlo(1.0), 1, &sampling).unwrap();
        assert_eq!(mc.se.max_abs(), 0.0);
        let again = mc_gradient_hae(&env, &p, &tables, &GaeConfig::monte_carlo(1.0), 1, &sampling).unwrap();
        assert_eq!(mc, again);
    }
}
