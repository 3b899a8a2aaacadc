//! Verification gates: each runs one exact or statistical check end to end
//! and returns a serialisable report with a `passed()` verdict.
//!
//! Enumeration-based gates use the timed FetchChain, whose state includes the
//! turn counter, so occupancy-weighted oracle values are true Markov values.

use crate::critic::{fit_batch, fit_flat_batch, FitConfig, TargetBatch, TargetMode, ValueTables};
use crate::env::{EnvModel, FetchChain, OneStep};
use crate::episode::{ActionId, BehaviorRecord, EpisodeEnd, State, SubgoalId, Switch, Trajectory, TurnRecord};
use crate::hae::GaeConfig;
use crate::oracle::{
    compare_gradients, compare_with_se, estimator_moments, expected_score, exact_advantage_variances,
    for_each_trajectory, mc_gradient_hae, oracle_gradient, oracle_values, switch_exactness, telescope_check,
    variance_report, EnumerationConfig, ExactVariances, OracleError, RandomTrajectorySpec, SampleConfig,
    SwitchExactnessReport, TelescopeReport, UnbiasedReport, VarianceReport,
};
use crate::policy::{grad_log_prob, log_prob, Dims, PolicyParams};
use crate::rng::stream;
use crate::trainer::{ppo_ratios, policy_loss, SurrogateTarget, TrainError, TurnSample};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Critic(#[from] crate::critic::CriticError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// Random logits `N(0, scale^2)` drawn from `stream(seed, 1)`.
pub fn random_policy(dims: Dims, seed: u64, scale: f64) -> PolicyParams {
    PolicyParams::random(dims, scale, &mut stream(seed, 1))
}

/// Timed FetchChain of length `length` and horizon `horizon` with a random policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainSetup {
    pub length: usize,
    pub horizon: usize,
    pub options: usize,
    pub policy_seed: u64,
    pub policy_scale: f64,
}

impl Default for ChainSetup {
    fn default() -> Self {
        Self { length: 3, horizon: 6, options: 2, policy_seed: 1, policy_scale: 1.0 }
    }
}

impl ChainSetup {
    pub fn env(&self) -> Result<FetchChain, VerifyError> {
        Ok(FetchChain::timed(self.length, self.horizon)?)
    }

    pub fn params(&self, env: &dyn EnvModel) -> PolicyParams {
        random_policy(Dims::for_env(env, self.options), self.policy_seed, self.policy_scale)
    }

    fn enumeration(&self) -> EnumerationConfig {
        EnumerationConfig::new(self.horizon)
    }
}

pub fn telescope(trials: usize, seed: u64) -> Result<TelescopeReport, VerifyError> {
    Ok(telescope_check(trials, seed, &RandomTrajectorySpec::default())?)
}

/// Switching advantages computed from exact tables against brute-force
/// `Q_switch - V_switch`.
pub fn switching(setup: &ChainSetup, gamma: f64) -> Result<SwitchExactnessReport, VerifyError> {
    let env = setup.env()?;
    let params = setup.params(&env);
    let values = oracle_values(&env, &params, &setup.enumeration(), gamma)?;
    Ok(switch_exactness(&params, &values))
}

#[derive(Debug, Clone, Serialize)]
pub struct UnbiasedCheck {
    pub setup: ChainSetup,
    pub sample_seed: u64,
    /// Gate: deviations measured in exact standard errors.
    pub exact_se: UnbiasedReport,
    /// Same deviations in sample standard errors, for information.
    pub sample_se: UnbiasedReport,
    /// Largest `|E[g_hat] - grad J|` over coordinates, from enumeration.
    pub exact_bias: f64,
}

impl UnbiasedCheck {
    pub fn passed(&self) -> bool {
        self.exact_se.passed()
    }
}

/// Monte Carlo mean of the hierarchical gradient estimator (oracle tables,
/// every lambda 1, `gamma = 1`) against the enumerated policy gradient.
pub fn unbiasedness(
    setup: &ChainSetup,
    samples: usize,
    sample_seed: u64,
    tolerance_se: f64,
) -> Result<UnbiasedCheck, VerifyError> {
    let env = setup.env()?;
    let params = setup.params(&env);
    let cfg = setup.enumeration();
    let gae = GaeConfig::monte_carlo(1.0);
    let tables = oracle_values(&env, &params, &cfg, 1.0)?.tables();
    let exact = oracle_gradient(&env, &params, &cfg, 1.0)?;
    let moments = estimator_moments(&env, &params, &tables, &gae, &cfg)?;
    let exact_bias = moments.mean.iter().zip(exact.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let sampling = SampleConfig { horizon: setup.horizon, c_keep: 0.0, seed: sample_seed };
    let mc = mc_gradient_hae(&env, &params, &tables, &gae, samples, &sampling)?;
    Ok(UnbiasedCheck {
        setup: *setup,
        sample_seed,
        exact_se: compare_with_se(&mc, &moments.standard_error(samples), &exact, tolerance_se),
        sample_se: compare_gradients(&mc, &exact, tolerance_se),
        exact_bias,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceCell {
    pub seed: u64,
    pub report: VarianceReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceCheck {
    pub setup: ChainSetup,
    pub cells: Vec<VarianceCell>,
    /// Exact variances from enumeration, for every reachable `t`.
    pub exact: Vec<ExactVariances>,
    /// Single-step environment whose action policy ignores the subgoal.
    pub equality: VarianceReport,
}

impl VarianceCheck {
    pub fn failed_cells(&self) -> Vec<&VarianceCell> {
        self.cells.iter().filter(|c| !c.report.low_not_larger()).collect()
    }

    pub fn exact_holds(&self) -> bool {
        self.exact.iter().all(|e| e.var_low <= e.var_flat + 1e-12)
    }

    pub fn passed(&self) -> bool {
        self.failed_cells().is_empty() && self.equality.overlapping()
    }
}

/// `Var(A_low_t)` against `Var(A_flat_t)` with oracle tables, every lambda 1
/// and `gamma = 1`, at every reachable `t` and for every sampling seed.
pub fn variance_reduction(
    setup: &ChainSetup,
    samples: usize,
    bootstrap: usize,
    seeds: &[u64],
) -> Result<VarianceCheck, VerifyError> {
    let env = setup.env()?;
    let params = setup.params(&env);
    let cfg = setup.enumeration();
    let gae = GaeConfig::monte_carlo(1.0);
    let values = oracle_values(&env, &params, &cfg, 1.0)?;
    let (tables, flat) = (values.tables(), values.flat_values());
    let exact = exact_advantage_variances(&env, &params, &tables, &flat, &gae, &cfg)?;
    let mut cells = Vec::new();
    for &seed in seeds {
        let sampling = SampleConfig { horizon: setup.horizon, c_keep: 0.0, seed };
        for e in &exact {
            let report = variance_report(&env, &params, &tables, &flat, &gae, e.t, samples, bootstrap, &sampling)?;
            cells.push(VarianceCell { seed, report });
        }
    }
    Ok(VarianceCheck { setup: *setup, cells, exact, equality: equality_case(samples, bootstrap, seeds.first().copied().unwrap_or(1))? })
}

/// One decision, rewards `[0, 10]`, random subgoal and switch logits and
/// action logits shared by both subgoals: `A_low` and `A_flat` coincide.
fn equality_case(samples: usize, bootstrap: usize, seed: u64) -> Result<VarianceReport, VerifyError> {
    let env = OneStep::with_rewards(vec![0.0, 10.0])?;
    let dims = Dims::for_env(&env, 2);
    let mut params = random_policy(dims, seed, 1.0);
    for s in 0..dims.states {
        let row0 = dims.action_row(State(s), SubgoalId(0));
        for o in 1..dims.options {
            let row = dims.action_row(State(s), SubgoalId(o));
            for a in 0..dims.actions {
                params.action[row + a] = params.action[row0 + a];
            }
        }
    }
    let cfg = EnumerationConfig::new(1);
    let gae = GaeConfig::monte_carlo(1.0);
    let values = oracle_values(&env, &params, &cfg, 1.0)?;
    let sampling = SampleConfig { horizon: 1, c_keep: 0.0, seed };
    Ok(variance_report(&env, &params, &values.tables(), &values.flat_values(), &gae, 0, samples, bootstrap, &sampling)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub configs: usize,
    pub coordinates: usize,
    /// Configurations redrawn because a ratio sat within `1e-3` of a clip edge.
    pub redrawn: usize,
    /// Largest `|fd - analytic| / max(1, |fd|, |analytic|)` for turn log-probabilities.
    pub max_rel_log_prob: f64,
    /// Same for the full PPO loss (clipped surrogates plus KL).
    pub max_rel_loss: f64,
    pub step: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_log_prob <= self.tolerance && self.max_rel_loss <= self.tolerance
    }
}

fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0)
}

fn normal_logits<R: Rng>(dims: Dims, scale: f64, rng: &mut R) -> PolicyParams {
    let mut p = PolicyParams::zeros(dims);
    p.iter_mut().for_each(|x| *x = scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    p
}

/// A random consistent trajectory with behavior log-probabilities taken from
/// `behavior`.
fn random_turns<R: Rng>(dims: Dims, behavior: &PolicyParams, rng: &mut R) -> Result<Vec<TurnRecord>, VerifyError> {
    let len = rng.random_range(1..=6);
    let mut prev: Option<SubgoalId> = None;
    let mut turns = Vec::with_capacity(len);
    for t in 0..len {
        let switch = if t == 0 || rng.random_bool(0.4) { Switch::Switch } else { Switch::Keep };
        let subgoal = match (switch, prev) {
            (Switch::Keep, Some(o)) => o,
            _ => SubgoalId(rng.random_range(0..dims.options)),
        };
        let mut turn = TurnRecord::new(
            t,
            State(rng.random_range(0..dims.states)),
            prev,
            switch,
            subgoal,
            ActionId(rng.random_range(0..dims.actions)),
            0.0,
        );
        turn.format_valid = !rng.random_bool(0.1);
        let lp = log_prob(behavior, &turn)?;
        turn.behavior = Some(BehaviorRecord { switch_logp: lp.switch, subgoal_logp: lp.subgoal, action_logp: lp.action, beta: None });
        prev = Some(subgoal);
        turns.push(turn);
    }
    if let Some(last) = turns.last_mut() {
        last.done = true;
    }
    Ok(turns)
}

fn near_kink(samples: &[TurnSample], params: &PolicyParams, eps: f64) -> Result<bool, VerifyError> {
    let near = |r: f64| (r - (1.0 - eps)).abs() < 1e-3 || (r - (1.0 + eps)).abs() < 1e-3;
    for s in samples {
        let r = ppo_ratios(params, &s.turn)?;
        let switch = r.switch.unwrap_or(1.0);
        let hit = match s.target {
            SurrogateTarget::Hierarchical { .. } => [switch, r.subgoal.unwrap_or(1.0), r.action].into_iter().any(near),
            SurrogateTarget::Joint { .. } => {
                // malformed turns leave the switch head out of the joint ratio
                let switch = if s.turn.format_valid { switch } else { 1.0 };
                near(switch * r.subgoal.unwrap_or(1.0) * r.action)
            }
        };
        if hit {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Central finite differences (step `h`) of turn log-probabilities and of the
/// full PPO loss on `configs` random configurations.
pub fn gradcheck(configs: usize, seed: u64, h: f64, tolerance: f64) -> Result<GradcheckReport, VerifyError> {
    let mut report = GradcheckReport {
        configs,
        coordinates: 0,
        redrawn: 0,
        max_rel_log_prob: 0.0,
        max_rel_loss: 0.0,
        step: h,
        tolerance,
    };
    let (eps, kl_beta) = (0.2, 0.05);
    for c in 0..configs {
        let mut rng = stream(seed, 0x9c00_0000 + c as u64);
        let (params, reference, samples) = loop {
            let dims = Dims::new(rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=4));
            let params = normal_logits(dims, 1.0, &mut rng);
            let mut behavior = params.clone();
            behavior.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
            let reference = normal_logits(dims, 1.0, &mut rng);
            let joint = rng.random_bool(0.3);
            let mut samples = Vec::new();
            for _ in 0..rng.random_range(1..=3) {
                for turn in random_turns(dims, &behavior, &mut rng)? {
                    let mut a = || rng.random_range(-2.0..2.0);
                    let target = if joint {
                        SurrogateTarget::Joint { advantage: a() }
                    } else {
                        let high = turn.switch.is_switch().then(&mut a);
                        let switch = (turn.t > 0).then(&mut a);
                        SurrogateTarget::Hierarchical { low: a(), high, switch }
                    };
                    samples.push(TurnSample { turn, target });
                }
            }
            if near_kink(&samples, &params, eps)? {
                report.redrawn += 1;
                continue;
            }
            break (params, reference, samples);
        };

        for s in &samples {
            let g = grad_log_prob(&params, &s.turn)?;
            for i in 0..params.len() {
                let fd = central(&params, i, h, |p| Ok(log_prob(p, &s.turn)?.total()))?;
                report.max_rel_log_prob = report.max_rel_log_prob.max(rel_err(fd, g.get(i)));
            }
        }
        let loss = policy_loss(&samples, &params, &reference, eps, kl_beta)?;
        for i in 0..params.len() {
            let fd = central(&params, i, h, |p| Ok(policy_loss(&samples, p, &reference, eps, kl_beta)?.loss))?;
            report.max_rel_loss = report.max_rel_loss.max(rel_err(fd, loss.grad.get(i)));
        }
        report.coordinates += params.len();
    }
    Ok(report)
}

fn central(
    params: &PolicyParams,
    i: usize,
    h: f64,
    f: impl Fn(&PolicyParams) -> Result<f64, VerifyError>,
) -> Result<f64, VerifyError> {
    let mut plus = params.clone();
    plus.set(i, params.get(i) + h);
    let mut minus = params.clone();
    minus.set(i, params.get(i) - h);
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

#[derive(Debug, Clone, Serialize)]
pub struct FixpointReport {
    pub setup: ChainSetup,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Sup-norm distance to the oracle on cells the oracle defines.
    pub sup_high: f64,
    pub sup_low: f64,
    pub sup_flat: f64,
    pub cells_high: usize,
    pub cells_low: usize,
    pub cells_flat: usize,
    pub tolerance: f64,
}

impl FixpointReport {
    pub fn passed(&self) -> bool {
        self.cells_high > 0 && self.sup_high.max(self.sup_low).max(self.sup_flat) <= self.tolerance
    }
}

/// Fits both critics from zero on the exact trajectory distribution of a
/// frozen random policy and compares with the enumerated values.
pub fn critic_fixpoint(
    setup: &ChainSetup,
    gamma: f64,
    epochs: usize,
    lr: f64,
    tolerance: f64,
) -> Result<FixpointReport, VerifyError> {
    let env = setup.env()?;
    let params = setup.params(&env);
    let cfg = setup.enumeration();
    let values = oracle_values(&env, &params, &cfg, gamma)?;
    let zeros = ValueTables::zeros(env.n_states(), setup.options);
    let flat_zeros = crate::critic::FlatValues::zeros(env.n_states());
    let mut two_head = TargetBatch::hierarchical(&zeros, gamma);
    let mut flat = TargetBatch::flat(&flat_zeros, gamma);
    let mut failure = None;
    for_each_trajectory(&env, &params, &cfg, |traj: &Trajectory, p| {
        if failure.is_none() {
            if let Err(e) = two_head.add(traj, p).and_then(|_| flat.add(traj, p)) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let fit = FitConfig { lr, epochs, mode: TargetMode::PerEpoch };
    let fitted = fit_batch(&zeros, &two_head, &fit)?.tables;
    let fitted_flat = fit_flat_batch(&flat_zeros, &flat, &fit)?.tables;

    let sup = |oracle: &[Option<f64>], fitted: &[f64]| {
        oracle.iter().zip(fitted).fold((0.0f64, 0usize), |(m, n), (o, f)| match o {
            Some(o) => (m.max((o - f).abs()), n + 1),
            None => (m, n),
        })
    };
    let (sup_high, cells_high) = sup(&values.high, &fitted.high);
    let (sup_low, cells_low) = sup(&values.low, &fitted.low);
    let (sup_flat, cells_flat) = sup(&values.flat, &fitted_flat.values);
    Ok(FixpointReport {
        setup: *setup,
        gamma,
        epochs,
        lr,
        sup_high,
        sup_low,
        sup_flat,
        cells_high,
        cells_low,
        cells_flat,
        tolerance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub setup: ChainSetup,
    pub max_abs: f64,
    pub tolerance: f64,
}

impl ScoreReport {
    pub fn passed(&self) -> bool {
        self.max_abs <= self.tolerance
    }
}

/// `E[sum_t grad log pi(turn_t)]` by enumeration, which must vanish.
pub fn score_identity(setup: &ChainSetup) -> Result<ScoreReport, VerifyError> {
    let env = setup.env()?;
    let params = setup.params(&env);
    let g = expected_score(&env, &params, &setup.enumeration())?;
    Ok(ScoreReport { setup: *setup, max_abs: g.max_abs(), tolerance: 1e-10 })
}

/// Probability mass of terminated episodes; 1 on the timed chain.
pub fn terminal_mass(setup: &ChainSetup) -> Result<f64, VerifyError> {
    let env = setup.env()?;
    let params = setup.params(&env);
    let mut mass = 0.0;
    for_each_trajectory(&env, &params, &setup.enumeration(), |traj, p| {
        if traj.end == EpisodeEnd::Terminal {
            mass += p;
        }
    })?;
    Ok(mass)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ChainSetup {
        ChainSetup { length: 2, horizon: 4, ..ChainSetup::default() }
    }

    #[test]
    fn gradcheck_small() {
        let r = gradcheck(10, 7, 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.coordinates > 0);
    }

    #[test]
    fn fixpoint_small() {
        let r = critic_fixpoint(&small(), 0.95, 200, 1.0, 1e-3).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.cells_low > 0 && r.cells_flat > 0);
    }

    #[test]
    fn score_and_switching_small() {
        assert!(score_identity(&small()).unwrap().passed());
        assert!(switching(&small(), 0.9).unwrap().passed());
        assert!((terminal_mass(&small()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unbiased_small() {
        let r = unbiasedness(&small(), 20_000, 3, 4.0).unwrap();
        assert!(r.exact_bias < 1e-12);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn variance_small() {
        let r = variance_reduction(&small(), 2000, 200, &[1]).unwrap();
        assert!(r.exact_holds());
        assert!(r.equality.overlapping());
        assert_eq!(r.equality.var_low, r.equality.var_flat);
    }
}
