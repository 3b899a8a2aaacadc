//! Hierarchical advantage estimation: execution (per turn, within segments),
//! planning (per segment) and switching (per turn) advantages, plus the flat
//! GAE baseline that ignores segment structure.

use crate::critic::{bootstrap_of, flat_next, Bootstrap, CriticError, FlatValues, ValueTables};
use crate::episode::{views_from, EpisodeEnd, EpisodeError, Segmentation, Trajectory};
use crate::policy::{switch_prob, PolicyError, PolicyParams};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HaeError {
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("turn {t}: no behavior switch probability recorded and no policy given")]
    MissingBeta { t: usize },
    #[error("{name} must lie in {range}, got {value}")]
    Config { name: &'static str, range: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Whiten {
    #[default]
    Off,
    /// Normalise each level to zero mean and unit variance over the batch.
    PerLevel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub lambda_flat: f64,
    pub whiten: Whiten,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self { gamma: 0.99, lambda_low: 0.95, lambda_high: 0.95, lambda_flat: 0.95, whiten: Whiten::Off }
    }
}

impl GaeConfig {
    /// Monte Carlo setting: every lambda 1, no whitening.
    pub fn monte_carlo(gamma: f64) -> Self {
        Self { gamma, lambda_low: 1.0, lambda_high: 1.0, lambda_flat: 1.0, whiten: Whiten::Off }
    }

    pub fn validate(&self) -> Result<(), HaeError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(HaeError::Config { name: "gamma", range: "(0, 1]", value: self.gamma });
        }
        for (name, value) in [
            ("lambda_low", self.lambda_low),
            ("lambda_high", self.lambda_high),
            ("lambda_flat", self.lambda_flat),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(HaeError::Config { name, range: "[0, 1]", value });
            }
        }
        Ok(())
    }
}

/// Advantages of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalAdvantages {
    pub boundaries: Vec<usize>,
    /// One per turn.
    pub low: Vec<f64>,
    /// One per segment, attached to turn `boundaries[k]`.
    pub high: Vec<f64>,
    /// One per turn; `None` at `t = 0`.
    pub switch: Vec<Option<f64>>,
    /// One per turn when requested.
    pub flat: Option<Vec<f64>>,
}

impl HierarchicalAdvantages {
    /// The planning advantage attached to turn `t`, present only at boundaries.
    pub fn high_at_turn(&self, t: usize) -> Option<f64> {
        self.boundaries[..self.boundaries.len() - 1]
            .binary_search(&t)
            .ok()
            .map(|k| self.high[k])
    }
}

/// `delta_low_t = r_t + gamma V_next(t) - V_low(s_t, o_t)`.
pub fn low_td_residuals(
    traj: &Trajectory,
    tables: &ValueTables,
    gamma: f64,
) -> Result<Vec<f64>, HaeError> {
    let targets = crate::critic::low_targets(traj, tables, gamma)?;
    Ok(traj
        .turns
        .iter()
        .zip(targets)
        .map(|(turn, y)| y - tables.low(turn.state, turn.subgoal))
        .collect())
}

/// Backward `(gamma lambda)`-accumulation of residuals, restarted at every boundary.
pub fn low_advantages(delta: &[f64], boundaries: &[usize], gamma: f64, lambda_low: f64) -> Vec<f64> {
    let mut out = vec![0.0; delta.len()];
    for w in boundaries.windows(2) {
        let mut acc = 0.0;
        for t in (w[0]..w[1]).rev() {
            acc = delta[t] + gamma * lambda_low * acc;
            out[t] = acc;
        }
    }
    out
}

/// Per-segment residuals and advantages `(delta_high, A_high)`.
pub fn high_advantages(
    traj: &Trajectory,
    tables: &ValueTables,
    gamma: f64,
    lambda_high: f64,
) -> Result<(Vec<f64>, Vec<f64>), HaeError> {
    let targets = crate::critic::high_targets(traj, tables, gamma)?;
    let seg = Segmentation::of(traj)?;
    let views = views_from(traj, &seg, gamma);
    let delta: Vec<f64> = views
        .iter()
        .zip(&targets)
        .map(|(v, y)| y - tables.high(traj.turns[v.start].state))
        .collect();
    let mut adv = vec![0.0; delta.len()];
    let mut acc = 0.0;
    for k in (0..delta.len()).rev() {
        // lambda enters once per segment, scaled by that segment's duration discount
        acc = delta[k] + views[k].duration_discount * lambda_high * acc;
        adv[k] = acc;
    }
    Ok((delta, adv))
}

/// `A_switch_t = (q_t - beta_t)(V_high(s_t) - V_low(s_t, o_{t-1}))` for `t >= 1`.
///
/// `beta_t` comes from the turn's behavior record; `params` is consulted only
/// for turns without one.
pub fn switch_advantages(
    traj: &Trajectory,
    tables: &ValueTables,
    params: Option<&PolicyParams>,
) -> Result<Vec<Option<f64>>, HaeError> {
    let mut out = Vec::with_capacity(traj.len());
    for (t, turn) in traj.turns.iter().enumerate() {
        if t == 0 {
            out.push(None);
            continue;
        }
        let prev = traj.turns[t - 1].subgoal;
        let beta = match (turn.behavior.and_then(|b| b.beta), params) {
            (Some(beta), _) => beta,
            (None, Some(p)) => switch_prob(p, turn.state, prev),
            (None, None) => return Err(HaeError::MissingBeta { t }),
        };
        let gain = tables.high(turn.state) - tables.low(turn.state, prev);
        out.push(Some((turn.q() - beta) * gain));
    }
    Ok(out)
}

/// Standard GAE over the whole episode with a state-only baseline.
pub fn flat_gae(
    traj: &Trajectory,
    values: &FlatValues,
    gamma: f64,
    lambda_flat: f64,
) -> Result<Vec<f64>, HaeError> {
    let targets = crate::critic::flat_one_step(traj, values, gamma)?;
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for t in (0..traj.len()).rev() {
        let delta = targets[t] - values.get(traj.turns[t].state);
        acc = delta + gamma * lambda_flat * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// All estimators for one trajectory, without whitening.
pub fn estimate(
    traj: &Trajectory,
    tables: &ValueTables,
    flat: Option<&FlatValues>,
    params: Option<&PolicyParams>,
    cfg: &GaeConfig,
) -> Result<HierarchicalAdvantages, HaeError> {
    cfg.validate()?;
    let seg = Segmentation::of(traj)?;
    let delta = low_td_residuals(traj, tables, cfg.gamma)?;
    let low = low_advantages(&delta, seg.boundaries(), cfg.gamma, cfg.lambda_low);
    let (_, high) = high_advantages(traj, tables, cfg.gamma, cfg.lambda_high)?;
    let switch = switch_advantages(traj, tables, params)?;
    let flat = flat.map(|f| flat_gae(traj, f, cfg.gamma, cfg.lambda_flat)).transpose()?;
    Ok(HierarchicalAdvantages { boundaries: seg.boundaries().to_vec(), low, high, switch, flat })
}

/// [`estimate`] over a batch (in parallel), then whitening per `cfg.whiten`.
pub fn estimate_all(
    batch: &[Trajectory],
    tables: &ValueTables,
    flat: Option<&FlatValues>,
    params: Option<&PolicyParams>,
    cfg: &GaeConfig,
) -> Result<Vec<HierarchicalAdvantages>, HaeError> {
    let mut out = batch
        .par_iter()
        .map(|traj| estimate(traj, tables, flat, params, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    if cfg.whiten == Whiten::PerLevel {
        whiten(out.iter_mut().flat_map(|a| a.low.iter_mut()));
        whiten(out.iter_mut().flat_map(|a| a.high.iter_mut()));
        whiten(out.iter_mut().flat_map(|a| a.switch.iter_mut().flatten()));
        whiten(out.iter_mut().flat_map(|a| a.flat.iter_mut().flatten()));
    }
    Ok(out)
}

/// Shifts to mean 0 and scales to unit (population) variance; a constant
/// level is only centred.
fn whiten<'a>(values: impl Iterator<Item = &'a mut f64>) {
    let mut refs: Vec<&mut f64> = values.collect();
    if refs.is_empty() {
        return;
    }
    let n = refs.len() as f64;
    let mean = refs.iter().map(|v| **v).sum::<f64>() / n;
    let var = refs.iter().map(|v| (**v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-24 { var.sqrt().recip() } else { 1.0 };
    for v in refs.iter_mut() {
        **v = (**v - mean) * scale;
    }
}

/// Closed forms that the `lambda = 1` estimators must reproduce exactly.
pub mod closed_form {
    use super::*;

    /// `sum_{l=t}^{b-1} gamma^(l-t) r_l + gamma^(b-t) V_high(s_b) - V_low(s_t, o_t)`
    /// where `b` ends the segment of `t`.
    pub fn low(traj: &Trajectory, tables: &ValueTables, gamma: f64, t: usize) -> Result<f64, HaeError> {
        let seg = Segmentation::of(traj)?;
        let end = seg.segment_end(t);
        let mut total = 0.0;
        let mut discount = 1.0;
        for l in t..end {
            total += discount * traj.turns[l].reward;
            discount *= gamma;
        }
        let boot = match bootstrap_of(traj, &seg, end - 1) {
            Bootstrap::High(s) => tables.high(s),
            _ => 0.0,
        };
        let turn = &traj.turns[t];
        Ok(total + discount * boot - tables.low(turn.state, turn.subgoal))
    }

    /// `G_{b_k} - V_high(s_{b_k})`, with `G` bootstrapped by `V_high(s_T)` when truncated.
    pub fn high(traj: &Trajectory, tables: &ValueTables, gamma: f64, k: usize) -> Result<f64, HaeError> {
        let seg = Segmentation::of(traj)?;
        let b = seg.boundaries()[k];
        Ok(bootstrapped_return(traj, tables, gamma, b) - tables.high(traj.turns[b].state))
    }

    /// Return-to-go from `t` plus the discounted truncation bootstrap `V_high(s_T)`.
    pub fn bootstrapped_return(traj: &Trajectory, tables: &ValueTables, gamma: f64, t: usize) -> f64 {
        let mut total = 0.0;
        let mut discount = 1.0;
        for turn in &traj.turns[t..] {
            total += discount * turn.reward;
            discount *= gamma;
        }
        match traj.end {
            EpisodeEnd::Terminal => total,
            EpisodeEnd::Truncated { final_state } => total + discount * tables.high(final_state),
        }
    }

    /// `G_t - V_flat(s_t)`, bootstrapped by `V_flat(s_T)` when truncated.
    pub fn flat(traj: &Trajectory, values: &FlatValues, gamma: f64, t: usize) -> f64 {
        let mut total = 0.0;
        let mut discount = 1.0;
        for turn in &traj.turns[t..] {
            total += discount * turn.reward;
            discount *= gamma;
        }
        let boot = flat_next(traj, traj.len() - 1).map_or(0.0, |s| values.get(s));
        total + discount * boot - values.get(traj.turns[t].state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::testutil::traj;
    use crate::episode::{BehaviorRecord, State, SubgoalId};

    fn tables(n: usize) -> ValueTables {
        ValueTables::zeros(n, 2)
    }

    fn with_beta(mut t: Trajectory, beta: f64) -> Trajectory {
        for turn in t.turns.iter_mut().skip(1) {
            turn.behavior = Some(BehaviorRecord {
                switch_logp: Some(0.0),
                subgoal_logp: None,
                action_logp: 0.0,
                beta: Some(beta),
            });
        }
        t
    }

    #[test]
    fn boundary_residual_cancels() {
        // turn 0 is segment-final; next boundary state 1 has V_high = 3
        let t = traj(&[1, 1], &[0.0, 0.0]);
        let mut v = tables(3);
        v.set_high(State(1), 3.0);
        v.set_low(State(0), SubgoalId(0), 3.0);
        assert_eq!(low_td_residuals(&t, &v, 1.0).unwrap()[0], 0.0);
    }

    #[test]
    fn interior_residual_arithmetic() {
        let t = traj(&[1, 0], &[0.5, 0.0]);
        let mut v = tables(3);
        v.set_low(State(1), SubgoalId(0), 2.0);
        v.set_low(State(0), SubgoalId(0), 1.0);
        assert!((low_td_residuals(&t, &v, 0.9).unwrap()[0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn low_accumulation_examples() {
        let delta = [1.0, 0.5, 2.0];
        assert_eq!(low_advantages(&delta, &[0, 3], 0.9, 0.0), delta.to_vec());
        assert_eq!(low_advantages(&delta, &[0, 2, 3], 1.0, 1.0), vec![1.5, 0.5, 2.0]);
    }

    #[test]
    fn high_accumulation_example() {
        // segments of length 2 and 1 with gamma 0.5: g~ = [0.25, 0.5]
        let t = traj(&[1, 0, 1], &[0.0; 3]);
        let mut v = tables(4);
        // choose tables so delta_high = [1, 2]
        v.set_high(State(0), -1.0);
        v.set_high(State(2), 0.0);
        let (delta, _) = high_advantages(&t, &v, 0.5, 1.0).unwrap();
        assert_eq!(delta, vec![1.0, 0.0]);
        let t = traj(&[1, 0, 1], &[0.0, 0.0, 2.0]);
        let (delta, adv) = high_advantages(&t, &v, 0.5, 1.0).unwrap();
        assert_eq!(delta, vec![1.0, 2.0]);
        assert_eq!(adv, vec![1.5, 2.0]);
        let single = traj(&[1, 0], &[1.0, 1.0]);
        let (d, a) = high_advantages(&single, &tables(3), 0.9, 0.7).unwrap();
        assert_eq!(d, a);
    }

    #[test]
    fn switch_examples() {
        let t = with_beta(traj(&[1, 1], &[0.0, 0.0]), 1.0);
        let mut v = tables(3);
        v.set_high(State(1), 5.0);
        assert_eq!(switch_advantages(&t, &v, None).unwrap(), vec![None, Some(0.0)]);
        let t = with_beta(traj(&[1, 0], &[0.0, 0.0]), 0.5);
        let mut v = tables(3);
        v.set_high(State(1), 2.0);
        assert_eq!(switch_advantages(&t, &v, None).unwrap(), vec![None, Some(-1.0)]);
        let bare = traj(&[1, 0], &[0.0, 0.0]);
        assert_eq!(switch_advantages(&bare, &v, None), Err(HaeError::MissingBeta { t: 1 }));
    }

    #[test]
    fn flat_examples() {
        let t = traj(&[1, 0, 1], &[0.0; 3]);
        let f = FlatValues::zeros(4);
        assert_eq!(flat_gae(&t, &f, 0.9, 0.95).unwrap(), vec![0.0; 3]);
        let one = traj(&[1], &[4.0]);
        let mut f = FlatValues::zeros(2);
        f.values[0] = 1.0;
        assert_eq!(flat_gae(&one, &f, 0.9, 0.3).unwrap(), vec![3.0]);
    }

    #[test]
    fn monte_carlo_matches_closed_forms() {
        let t = traj(&[1, 0, 0, 1, 0, 1], &[0.3, -1.0, 2.0, 0.0, 0.5, 4.0]);
        let mut v = tables(7);
        for (i, x) in v.high.iter_mut().enumerate() {
            *x = (i as f64 * 1.3).cos() * 3.0;
        }
        for (i, x) in v.low.iter_mut().enumerate() {
            *x = (i as f64 * 0.7).sin() * 2.0;
        }
        let gamma = 0.87;
        let seg = Segmentation::of(&t).unwrap();
        let a = estimate(&t, &v, None, None, &GaeConfig::monte_carlo(gamma));
        // no behavior record: switch advantages need a policy
        assert!(a.is_err());
        let p = PolicyParams::zeros(crate::policy::Dims::new(7, 2, 1));
        let a = estimate(&t, &v, None, Some(&p), &GaeConfig::monte_carlo(gamma)).unwrap();
        for i in 0..t.len() {
            assert!((a.low[i] - closed_form::low(&t, &v, gamma, i).unwrap()).abs() < 1e-12);
        }
        for k in 0..seg.count() {
            assert!((a.high[k] - closed_form::high(&t, &v, gamma, k).unwrap()).abs() < 1e-12);
        }
        assert_eq!(a.high_at_turn(3), Some(a.high[1]));
        assert_eq!(a.high_at_turn(4), None);
    }

    #[test]
    fn whitening_per_level() {
        let batch: Vec<Trajectory> = (0..4)
            .map(|i| with_beta(traj(&[1, 0, 1, 0], &[i as f64, 0.0, 1.0, -(i as f64)]), 0.3))
            .collect();
        let v = tables(5);
        let f = FlatValues::zeros(5);
        let cfg = GaeConfig { whiten: Whiten::PerLevel, ..GaeConfig::default() };
        let out = estimate_all(&batch, &v, Some(&f), None, &cfg).unwrap();
        let low: Vec<f64> = out.iter().flat_map(|a| a.low.clone()).collect();
        let n = low.len() as f64;
        let mean = low.iter().sum::<f64>() / n;
        let var = low.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-6);
        let off = estimate_all(&batch, &v, Some(&f), None, &GaeConfig::default()).unwrap();
        assert_eq!(off[0], estimate(&batch[0], &v, Some(&f), None, &GaeConfig::default()).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = GaeConfig { lambda_low: 1.5, ..GaeConfig::default() };
        assert!(matches!(bad.validate(), Err(HaeError::Config { name: "lambda_low", .. })));
        assert!(GaeConfig::monte_carlo(1.0).validate().is_ok());
    }
}
