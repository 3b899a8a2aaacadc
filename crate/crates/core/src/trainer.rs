//! Hierarchical PPO: per-head ratios, clipped surrogates, KL penalty toward a
//! reference policy, the iteration driver, and a flat-GAE PPO baseline.

use crate::critic::{
    fit_batch, fit_flat_batch, CriticError, FitConfig, FlatValues, TargetBatch, TargetMode,
    ValueTables,
};
use crate::env::{EnvError, EnvModel, SUCCESS_REWARD};
use crate::episode::{EpisodeError, Segmentation, Trajectory, TurnRecord};
use crate::hae::{self, GaeConfig, HaeError, Whiten};
use crate::policy::{
    add_row_score, check_turn, rollout, rollout_with, turn_heads, Dims, GradTables, Head,
    PolicyError, PolicyParams, Sampling,
};
use crate::rng::{stream, EpisodeKey};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Hae(#[from] HaeError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("turn {t}: no behavior log-probability recorded for the {head:?} head")]
    MissingBehavior { t: usize, head: Head },
    #[error("iteration {iteration}: non-finite {what}")]
    NonFinite { iteration: usize, what: &'static str },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub gae: GaeConfig,
    pub clip_eps: f64,
    /// Weight of the critic loss; scales the critic step.
    pub c_v: f64,
    pub kl_beta: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub epochs: usize,
    /// Turns per minibatch.
    pub minibatch: usize,
    pub iterations: usize,
    pub episodes_per_iter: usize,
    pub eval_episodes: usize,
    pub c_keep: f64,
    pub n_options: usize,
    pub seed: u64,
    /// Standard deviation of the initial logits; 0 starts uniform.
    pub init_scale: f64,
    /// Stop once greedy evaluation reaches this success rate.
    pub stop_success: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gae: GaeConfig { whiten: Whiten::PerLevel, ..GaeConfig::default() },
            clip_eps: 0.2,
            c_v: 1.0,
            kl_beta: 0.01,
            lr_actor: 1e-2,
            lr_critic: 1e-1,
            epochs: 4,
            minibatch: 64,
            iterations: 300,
            episodes_per_iter: 32,
            eval_episodes: 10,
            c_keep: 0.3,
            n_options: 2,
            seed: 0,
            init_scale: 0.0,
            stop_success: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.gae.validate()?;
        let positive = [("clip_eps", self.clip_eps)];
        let non_negative = [
            ("c_v", self.c_v),
            ("kl_beta", self.kl_beta),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("c_keep", self.c_keep),
            ("init_scale", self.init_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("minibatch", self.minibatch),
            ("episodes_per_iter", self.episodes_per_iter),
            ("n_options", self.n_options),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Probability ratios `pi_theta / pi_old` of the heads present in a turn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios {
    pub switch: Option<f64>,
    pub subgoal: Option<f64>,
    pub action: f64,
}

fn behavior_logp(turn: &TurnRecord, head: Head) -> Result<f64, TrainError> {
    let missing = TrainError::MissingBehavior { t: turn.t, head };
    let b = turn.behavior.ok_or(missing)?;
    match head {
        Head::Switch => b.switch_logp.ok_or(TrainError::MissingBehavior { t: turn.t, head }),
        Head::Subgoal => b.subgoal_logp.ok_or(TrainError::MissingBehavior { t: turn.t, head }),
        Head::Action => Ok(b.action_logp),
    }
}

fn live_logp(params: &PolicyParams, head: Head, offset: usize, chosen: usize) -> f64 {
    params.row_probs(head, offset)[chosen].ln()
}

pub fn ppo_ratios(params: &PolicyParams, turn: &TurnRecord) -> Result<Ratios, TrainError> {
    check_turn(params, turn)?;
    let mut out = Ratios { switch: None, subgoal: None, action: 1.0 };
    for h in turn_heads(params.dims, turn) {
        let r = (live_logp(params, h.head, h.offset, h.chosen) - behavior_logp(turn, h.head)?).exp();
        match h.head {
            Head::Switch => out.switch = Some(r),
            Head::Subgoal => out.subgoal = Some(r),
            Head::Action => out.action = r,
        }
    }
    Ok(out)
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` and its derivative in `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if clipped < unclipped {
        (clipped, 0.0)
    } else {
        (unclipped, advantage)
    }
}

/// Frozen advantages attached to one turn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurrogateTarget {
    /// One surrogate per head; `high` only at switch turns, `switch` absent at
    /// `t = 0` and on malformed turns.
    Hierarchical { low: f64, high: Option<f64>, switch: Option<f64> },
    /// A single surrogate on the joint log-probability of the turn.
    Joint { advantage: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnSample {
    pub turn: TurnRecord,
    pub target: SurrogateTarget,
}

/// Pairs every turn with its hierarchical advantages.
pub fn hierarchical_samples(
    batch: &[Trajectory],
    advantages: &[hae::HierarchicalAdvantages],
) -> Vec<TurnSample> {
    let mut out = Vec::new();
    for (traj, adv) in batch.iter().zip(advantages) {
        for (t, turn) in traj.turns.iter().enumerate() {
            let switch = if turn.format_valid { adv.switch[t] } else { None };
            out.push(TurnSample {
                turn: turn.clone(),
                target: SurrogateTarget::Hierarchical { low: adv.low[t], high: adv.high_at_turn(t), switch },
            });
        }
    }
    out
}

/// Pairs every turn with its flat advantage.
pub fn joint_samples(batch: &[Trajectory], advantages: &[Vec<f64>]) -> Vec<TurnSample> {
    let mut out = Vec::new();
    for (traj, adv) in batch.iter().zip(advantages) {
        for (turn, &a) in traj.turns.iter().zip(adv) {
            out.push(TurnSample { turn: turn.clone(), target: SurrogateTarget::Joint { advantage: a } });
        }
    }
    out
}

/// Mean clipped-surrogate objective over the samples and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorLoss {
    /// `L_actor`, to be maximised.
    pub objective: f64,
    pub grad: GradTables,
    /// Fraction of surrogate terms sitting on the clipped branch.
    pub clip_fraction: f64,
}

pub fn actor_loss(samples: &[TurnSample], params: &PolicyParams, eps: f64) -> Result<ActorLoss, TrainError> {
    let mut grad = GradTables::zeros(params.dims);
    let mut objective = 0.0;
    let (mut terms, mut clipped) = (0usize, 0usize);
    let n = samples.len().max(1) as f64;
    for sample in samples {
        let turn = &sample.turn;
        check_turn(params, turn)?;
        let heads = turn_heads(params.dims, turn);
        match sample.target {
            SurrogateTarget::Hierarchical { low, high, switch } => {
                for h in &heads {
                    let advantage = match h.head {
                        Head::Switch => switch,
                        Head::Subgoal => high,
                        Head::Action => Some(low),
                    };
                    let Some(advantage) = advantage else { continue };
                    let r = (live_logp(params, h.head, h.offset, h.chosen) - behavior_logp(turn, h.head)?).exp();
                    let (value, slope) = clipped_surrogate(r, advantage, eps);
                    objective += value;
                    terms += 1;
                    if slope == 0.0 && advantage != 0.0 {
                        clipped += 1;
                    }
                    add_row_score(params, h.head, h.offset, h.chosen, slope * r / n, &mut grad);
                }
            }
            SurrogateTarget::Joint { advantage } => {
                let used: Vec<_> = heads
                    .iter()
                    .filter(|h| h.head != Head::Switch || turn.format_valid)
                    .collect();
                let mut log_ratio = 0.0;
                for h in &used {
                    log_ratio += live_logp(params, h.head, h.offset, h.chosen) - behavior_logp(turn, h.head)?;
                }
                let r = log_ratio.exp();
                let (value, slope) = clipped_surrogate(r, advantage, eps);
                objective += value;
                terms += 1;
                if slope == 0.0 && advantage != 0.0 {
                    clipped += 1;
                }
                for h in used {
                    add_row_score(params, h.head, h.offset, h.chosen, slope * r / n, &mut grad);
                }
            }
        }
    }
    Ok(ActorLoss {
        objective: objective / n,
        grad,
        clip_fraction: if terms > 0 { clipped as f64 / terms as f64 } else { 0.0 },
    })
}

/// Exact categorical `KL(p || q)` between two logit rows and its gradient in
/// the logits of `p`: `p_j (log p_j - log q_j - KL)`.
fn row_kl(p_logits: &[f64], q_logits: &[f64]) -> (f64, Vec<f64>) {
    let p = crate::policy::softmax(p_logits);
    let q = crate::policy::softmax(q_logits);
    let log_ratio: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| if a > 0.0 { a.ln() - b.ln() } else { 0.0 })
        .collect();
    let kl: f64 = p.iter().zip(&log_ratio).map(|(a, l)| a * l).sum();
    let grad = p.iter().zip(&log_ratio).map(|(a, l)| a * (l - kl)).collect();
    (kl, grad)
}

/// Mean over turns of the summed per-head KL from the live policy to the
/// reference, with its gradient.
pub fn kl_penalty<'a>(
    params: &PolicyParams,
    reference: &PolicyParams,
    turns: impl IntoIterator<Item = &'a TurnRecord>,
) -> Result<(f64, GradTables), TrainError> {
    if params.dims != reference.dims {
        return Err(TrainError::Config(format!(
            "reference dims {:?} differ from policy dims {:?}",
            reference.dims, params.dims
        )));
    }
    let mut grad = GradTables::zeros(params.dims);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut rows = Vec::new();
    for turn in turns {
        check_turn(params, turn)?;
        count += 1;
        rows.extend(turn_heads(params.dims, turn));
    }
    let n = count.max(1) as f64;
    for h in rows {
        let width = crate::policy::row_width(params.dims, h.head);
        let range = h.offset..h.offset + width;
        let (kl, g) = row_kl(&params.head(h.head)[range.clone()], &reference.head(h.head)[range.clone()]);
        total += kl;
        for (dst, v) in grad.head_mut(h.head)[range].iter_mut().zip(g) {
            *dst += v / n;
        }
    }
    Ok((total / n, grad))
}

/// The minimised quantity `-L_actor + kl_beta * KL` and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    pub loss: f64,
    pub actor_objective: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad: GradTables,
}

pub fn policy_loss(
    samples: &[TurnSample],
    params: &PolicyParams,
    reference: &PolicyParams,
    clip_eps: f64,
    kl_beta: f64,
) -> Result<PolicyLoss, TrainError> {
    let actor = actor_loss(samples, params, clip_eps)?;
    let (kl, kl_grad) = kl_penalty(params, reference, samples.iter().map(|s| &s.turn))?;
    let mut grad = actor.grad;
    grad.scale(-1.0);
    let mut kl_grad = kl_grad;
    kl_grad.scale(kl_beta);
    grad.add_assign(&kl_grad);
    Ok(PolicyLoss {
        loss: -actor.objective + kl_beta * kl,
        actor_objective: actor.objective,
        kl,
        clip_fraction: actor.clip_fraction,
        grad,
    })
}

/// Whether the episode ended with the success reward (on raw rewards).
pub fn is_success(traj: &Trajectory) -> bool {
    traj.is_terminal() && traj.turns.last().is_some_and(|t| t.done && t.raw_reward >= SUCCESS_REWARD)
}

/// Segment statistics of a batch, pooled over episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchStats {
    /// Segments per episode.
    pub mean_segments: f64,
    /// Turns per segment.
    pub mean_seg_len: f64,
    /// Fraction of turns `t >= 1` that switch.
    pub switch_rate: f64,
    /// Turns per episode.
    pub mean_len: f64,
}

impl SwitchStats {
    pub fn of(batch: &[Trajectory]) -> Result<Self, TrainError> {
        let (mut segments, mut turns, mut switches, mut decisions) = (0usize, 0usize, 0usize, 0usize);
        for traj in batch {
            segments += Segmentation::of(traj)?.count();
            turns += traj.len();
            decisions += traj.len().saturating_sub(1);
            switches += traj.turns.iter().skip(1).filter(|t| t.switch.is_switch()).count();
        }
        let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        Ok(Self {
            mean_segments: ratio(segments, batch.len()),
            mean_seg_len: ratio(turns, segments),
            switch_rate: ratio(switches, decisions),
            mean_len: ratio(turns, batch.len()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Argmax at every head, ties to the lowest index.
    Greedy,
    Sample { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean undiscounted raw return.
    pub mean_return: f64,
    pub stats: SwitchStats,
}

pub fn evaluate(
    params: &PolicyParams,
    env: &dyn EnvModel,
    episodes: usize,
    mode: EvalMode,
    c_keep: f64,
) -> Result<EvalReport, TrainError> {
    let horizon = env.horizon();
    let batch = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let sampling = match mode {
                EvalMode::Greedy => Sampling::Greedy,
                EvalMode::Sample { seed } => Sampling::Stochastic(EpisodeKey::new(seed, i as u64)),
            };
            rollout_with(env, params, horizon, sampling, c_keep)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = episodes.max(1) as f64;
    Ok(EvalReport {
        episodes,
        success_rate: batch.iter().filter(|t| is_success(t)).count() as f64 / n,
        mean_return: batch.iter().map(Trajectory::raw_return).sum::<f64>() / n,
        stats: SwitchStats::of(&batch)?,
    })
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub mean_return: f64,
    pub success: f64,
    pub mean_segments: f64,
    pub mean_seg_len: f64,
    pub switch_rate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub kl: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "iter,mean_return,success,mean_segments,mean_seg_len,switch_rate,actor_loss,critic_loss,kl";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.mean_return,
            self.success,
            self.mean_segments,
            self.mean_seg_len,
            self.switch_rate,
            self.actor_loss,
            self.critic_loss,
            self.kl
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{}", MetricsRow::CSV_HEADER)?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    Ok(())
}

/// Greedy evaluation after an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub iter: usize,
    pub success: f64,
    pub mean_return: f64,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "iter,success,mean_return";

    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.iter, self.success, self.mean_return)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CriticState {
    TwoHead(ValueTables),
    Flat(FlatValues),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    /// Policy that collected the current batch.
    pub behavior: PolicyParams,
    /// Fixed KL anchor, the initial parameters.
    pub reference: PolicyParams,
    pub critic: CriticState,
    /// Completed iterations.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    /// First iteration whose greedy evaluation reached `stop_success`.
    pub reached_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    Hierarchical,
    Flat,
}

/// Called after every iteration; an error stops training.
pub type Observer<'a> = dyn FnMut(&TrainState, &MetricsRow) -> Result<(), TrainError> + 'a;

const SHUFFLE_STREAM: u64 = 0x5_0000_0000;
const INIT_STREAM: u64 = 0x1;

/// Hierarchical PPO on `env`.
pub fn train(env: &dyn EnvModel, cfg: &PpoConfig, observer: &mut Observer) -> Result<TrainOutcome, TrainError> {
    run(env, cfg, Variant::Hierarchical, observer)
}

/// PPO with a state-only critic, flat GAE and one surrogate on the joint
/// turn log-probability.
pub fn train_flat_baseline(
    env: &dyn EnvModel,
    cfg: &PpoConfig,
    observer: &mut Observer,
) -> Result<TrainOutcome, TrainError> {
    run(env, cfg, Variant::Flat, observer)
}

/// Initial state for a run.
pub fn initial_state(env: &dyn EnvModel, cfg: &PpoConfig, flat: bool) -> TrainState {
    let dims = Dims::for_env(env, cfg.n_options);
    let params = if cfg.init_scale > 0.0 {
        PolicyParams::random(dims, cfg.init_scale, &mut stream(cfg.seed, INIT_STREAM))
    } else {
        PolicyParams::zeros(dims)
    };
    let critic = if flat {
        CriticState::Flat(FlatValues::zeros(dims.states))
    } else {
        CriticState::TwoHead(ValueTables::zeros(dims.states, dims.options))
    };
    TrainState { behavior: params.clone(), reference: params.clone(), params, critic, iteration: 0 }
}

fn collect(env: &dyn EnvModel, params: &PolicyParams, cfg: &PpoConfig, iteration: usize) -> Result<Vec<Trajectory>, TrainError> {
    let base = (iteration * cfg.episodes_per_iter) as u64;
    let horizon = env.horizon();
    Ok((0..cfg.episodes_per_iter)
        .into_par_iter()
        .map(|i| rollout(env, params, horizon, EpisodeKey::new(cfg.seed, base + i as u64), cfg.c_keep))
        .collect::<Result<Vec<_>, _>>()?)
}

fn run(env: &dyn EnvModel, cfg: &PpoConfig, variant: Variant, observer: &mut Observer) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut state = initial_state(env, cfg, variant == Variant::Flat);
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut evals = Vec::with_capacity(cfg.iterations);
    let mut reached_at = None;
    let fit = FitConfig { lr: cfg.lr_critic * cfg.c_v, epochs: cfg.epochs, mode: TargetMode::PerEpoch };
    for iteration in 0..cfg.iterations {
        state.behavior = state.params.clone();
        let batch = collect(env, &state.behavior, cfg, iteration)?;
        let gamma = cfg.gae.gamma;

        let (samples, critic_loss) = match &mut state.critic {
            CriticState::TwoHead(tables) => {
                let mut targets = TargetBatch::hierarchical(tables, gamma);
                for traj in &batch {
                    targets.add(traj, 1.0)?;
                }
                let report = fit_batch(tables, &targets, &fit)?;
                *tables = report.tables.clone();
                let advantages = hae::estimate_all(&batch, tables, None, None, &cfg.gae)?;
                (hierarchical_samples(&batch, &advantages), report.final_loss())
            }
            CriticState::Flat(values) => {
                let mut targets = TargetBatch::flat(values, gamma);
                for traj in &batch {
                    targets.add(traj, 1.0)?;
                }
                let report = fit_flat_batch(values, &targets, &fit)?;
                *values = report.tables.clone();
                let shape = ValueTables::zeros(values.values.len(), cfg.n_options);
                let advantages = hae::estimate_all(&batch, &shape, Some(values), None, &cfg.gae)?;
                let flat: Vec<Vec<f64>> = advantages.into_iter().map(|a| a.flat.unwrap_or_default()).collect();
                (joint_samples(&batch, &flat), report.final_loss())
            }
        };
        if !critic_loss.is_finite() {
            return Err(TrainError::NonFinite { iteration, what: "critic loss" });
        }

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = stream(cfg.seed, SHUFFLE_STREAM + iteration as u64);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch) {
                let mb: Vec<TurnSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let loss = policy_loss(&mb, &state.params, &state.reference, cfg.clip_eps, cfg.kl_beta)?;
                if !loss.loss.is_finite() || !loss.grad.is_finite() {
                    return Err(TrainError::NonFinite { iteration, what: "policy loss" });
                }
                loss_sum += -loss.actor_objective;
                steps += 1;
                state.params.add_scaled(&loss.grad, -cfg.lr_actor)?;
            }
        }
        if !state.params.is_finite() {
            return Err(TrainError::NonFinite { iteration, what: "policy parameters" });
        }
        let (kl, _) = kl_penalty(&state.params, &state.reference, batch.iter().flat_map(|t| &t.turns))?;
        let stats = SwitchStats::of(&batch)?;
        let n = batch.len() as f64;
        let row = MetricsRow {
            iter: iteration,
            mean_return: batch.iter().map(Trajectory::raw_return).sum::<f64>() / n,
            success: batch.iter().filter(|t| is_success(t)).count() as f64 / n,
            mean_segments: stats.mean_segments,
            mean_seg_len: stats.mean_seg_len,
            switch_rate: stats.switch_rate,
            actor_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            critic_loss,
            kl,
        };
        state.iteration = iteration + 1;
        let eval = evaluate(&state.params, env, cfg.eval_episodes.max(1), EvalMode::Greedy, cfg.c_keep)?;
        evals.push(EvalRow { iter: iteration, success: eval.success_rate, mean_return: eval.mean_return });
        metrics.push(row);
        observer(&state, &row)?;
        if let Some(target) = cfg.stop_success {
            if eval.success_rate >= target {
                reached_at = Some(iteration);
                break;
            }
        }
    }
    Ok(TrainOutcome { state, metrics, evals, reached_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FetchChain, OneStep, LEFT, PICKUP, RIGHT};
    use crate::episode::{BehaviorRecord, State, SubgoalId, Switch};
    use crate::policy::log_prob;

    fn with_behavior(params: &PolicyParams, mut turn: TurnRecord) -> TurnRecord {
        let lp = log_prob(params, &turn).unwrap();
        turn.behavior = Some(BehaviorRecord {
            switch_logp: lp.switch,
            subgoal_logp: lp.subgoal,
            action_logp: lp.action,
            beta: None,
        });
        turn
    }

    fn dims() -> Dims {
        Dims::new(3, 2, 2)
    }

    #[test]
    fn ratios_are_one_at_behavior_and_shift_with_logits() {
        let p = PolicyParams::zeros(dims());
        let turn = with_behavior(&p, TurnRecord::new(1, State(0), Some(SubgoalId(0)), Switch::Keep, SubgoalId(0), crate::episode::ActionId(1), 0.0));
        let r = ppo_ratios(&p, &turn).unwrap();
        assert_eq!(r, Ratios { switch: Some(1.0), subgoal: None, action: 1.0 });
        let mut live = p.clone();
        let off = live.dims.action_row(State(0), SubgoalId(0));
        live.action[off + 1] += 2f64.ln();
        let r = ppo_ratios(&live, &turn).unwrap();
        assert!((r.action - 4.0 / 3.0).abs() < 1e-12);
        let mut bare = turn.clone();
        bare.behavior = None;
        assert!(matches!(ppo_ratios(&p, &bare), Err(TrainError::MissingBehavior { .. })));
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2).0, 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2).0, -0.8);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), (3.0, 3.0));
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), (-1.5, -1.0));
    }

    #[test]
    fn surrogate_at_behavior_sums_present_advantages() {
        let p = PolicyParams::zeros(dims());
        let first = with_behavior(&p, TurnRecord::new(0, State(0), None, Switch::Switch, SubgoalId(1), crate::episode::ActionId(0), 0.0));
        let keep = with_behavior(&p, TurnRecord::new(1, State(1), Some(SubgoalId(1)), Switch::Keep, SubgoalId(1), crate::episode::ActionId(1), 0.0));
        let samples = vec![
            TurnSample { turn: first, target: SurrogateTarget::Hierarchical { low: 1.0, high: Some(2.0), switch: None } },
            TurnSample { turn: keep, target: SurrogateTarget::Hierarchical { low: 0.5, high: None, switch: Some(-1.0) } },
        ];
        let loss = actor_loss(&samples, &p, 0.2).unwrap();
        assert!((loss.objective - (1.0 + 2.0 + 0.5 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = PolicyParams::zeros(dims());
        let turn = TurnRecord::new(1, State(0), Some(SubgoalId(0)), Switch::Keep, SubgoalId(0), crate::episode::ActionId(0), 0.0);
        assert_eq!(kl_penalty(&p, &p, [&turn]).unwrap().0, 0.0);
        let mut live = p.clone();
        let off = live.dims.switch_row(State(0), SubgoalId(0));
        live.switch[off + 1] = 3f64.ln();
        let (kl, _) = kl_penalty(&live, &p, [&turn]).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((expected - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let d = Dims::new(4, 2, 3);
        let reference = PolicyParams::random(d, 1.0, &mut stream(2, 9));
        let p = PolicyParams::random(d, 1.0, &mut stream(3, 9));
        let turns = [
            TurnRecord::new(0, State(1), None, Switch::Switch, SubgoalId(1), crate::episode::ActionId(2), 0.0),
            TurnRecord::new(1, State(2), Some(SubgoalId(1)), Switch::Keep, SubgoalId(1), crate::episode::ActionId(0), 0.0),
        ];
        let (_, g) = kl_penalty(&p, &reference, &turns).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a.set(i, p.get(i) + h);
            let mut b = p.clone();
            b.set(i, p.get(i) - h);
            let fd = (kl_penalty(&a, &reference, &turns).unwrap().0 - kl_penalty(&b, &reference, &turns).unwrap().0) / (2.0 * h);
            assert!((fd - g.get(i)).abs() < 1e-7, "coord {i}");
        }
    }

    #[test]
    fn switch_stats_identity() {
        let batch = vec![
            crate::episode::testutil::traj(&[1, 0, 1, 0, 0], &[0.0; 5]),
            crate::episode::testutil::traj(&[1, 1], &[0.0; 2]),
        ];
        let s = SwitchStats::of(&batch).unwrap();
        assert_eq!(s.mean_segments, 2.0);
        assert_eq!(s.mean_seg_len, 7.0 / 4.0);
        assert_eq!(s.switch_rate, 2.0 / 5.0);
        assert!((s.mean_segments * s.mean_seg_len - s.mean_len).abs() < 1e-12);
    }

    #[test]
    fn evaluate_hand_coded_optimum() {
        let env = FetchChain::new(3, 8).unwrap();
        let mut p = PolicyParams::zeros(Dims::for_env(&env, 2));
        for s in 0..env.n_states() {
            let Ok(cell) = env.decode(State(s)) else { continue };
            let best = match (cell.carrying, cell.position) {
                (false, 2) => PICKUP,
                (false, _) => RIGHT,
                (true, 0) => crate::env::DROP,
                (true, _) => LEFT,
            };
            for o in 0..2 {
                let off = p.dims.action_row(State(s), SubgoalId(o));
                p.action[off + best.0] = 50.0;
            }
        }
        let r = evaluate(&p, &env, 3, EvalMode::Greedy, 0.3).unwrap();
        assert_eq!(r.success_rate, 1.0);
        assert_eq!(r.mean_return, 10.0);
        assert_eq!(evaluate(&p, &env, 3, EvalMode::Greedy, 0.3).unwrap(), r);
    }

    #[test]
    fn zero_learning_rates_leave_params_unchanged() {
        let env = OneStep::constant(3, 1.0).unwrap();
        let cfg = PpoConfig { lr_actor: 0.0, lr_critic: 0.0, iterations: 3, episodes_per_iter: 4, kl_beta: 0.0, ..PpoConfig::default() };
        let out = train(&env, &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(out.state.params, out.state.reference);
        assert_eq!(out.metrics.len(), 3);
        let flat = train_flat_baseline(&env, &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(flat.state.params, flat.state.reference);
    }

    #[test]
    fn training_is_deterministic() {
        let env = FetchChain::new(3, 8).unwrap();
        let cfg = PpoConfig { iterations: 3, episodes_per_iter: 8, seed: 5, ..PpoConfig::default() };
        let a = train(&env, &cfg, &mut |_, _| Ok(())).unwrap();
        let b = train(&env, &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_step_aborts() {
        let env = OneStep::with_rewards(vec![f64::NAN, 1.0]).unwrap();
        let cfg = PpoConfig { iterations: 2, episodes_per_iter: 4, ..PpoConfig::default() };
        let err = train(&env, &cfg, &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }
}
