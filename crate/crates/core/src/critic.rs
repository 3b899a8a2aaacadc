//! Two-head value tables, their coupled bootstrapped targets, and fitting.
//!
//! `high[s]` is the value of choosing a fresh subgoal at `s`; `low[s][o]` the
//! value of continuing with subgoal `o` at `s`. The last turn of every segment
//! bootstraps from `high` at the next boundary, never from `low`.

use crate::episode::{
    views_from, EpisodeEnd, EpisodeError, Segmentation, State, SubgoalId, Trajectory,
};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CriticError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("{what} index {index} out of range (< {bound})")]
    Index { what: &'static str, index: usize, bound: usize },
    #[error("table shapes differ: expected {expected:?}, found {found:?}")]
    Shape { expected: (usize, usize), found: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub states: usize,
    pub options: usize,
    /// `[s]`
    pub high: Vec<f64>,
    /// `[s][o]`
    pub low: Vec<f64>,
}

impl ValueTables {
    pub fn zeros(states: usize, options: usize) -> Self {
        Self { states, options, high: vec![0.0; states], low: vec![0.0; states * options] }
    }

    pub fn high(&self, s: State) -> f64 {
        self.high[s.0]
    }

    pub fn low(&self, s: State, o: SubgoalId) -> f64 {
        self.low[s.0 * self.options + o.0]
    }

    pub fn set_high(&mut self, s: State, v: f64) {
        self.high[s.0] = v;
    }

    pub fn set_low(&mut self, s: State, o: SubgoalId, v: f64) {
        self.low[s.0 * self.options + o.0] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.high.iter().chain(&self.low).all(|v| v.is_finite())
    }

    fn flat(&self) -> Vec<f64> {
        self.high.iter().chain(&self.low).copied().collect()
    }

    fn assign_flat(&mut self, values: &[f64]) {
        let (high, low) = values.split_at(self.states);
        self.high.copy_from_slice(high);
        self.low.copy_from_slice(low);
    }

    fn high_cell(&self, s: State) -> usize {
        s.0
    }

    fn low_cell(&self, s: State, o: SubgoalId) -> usize {
        self.states + s.0 * self.options + o.0
    }

    fn check(&self, traj: &Trajectory) -> Result<(), CriticError> {
        for turn in &traj.turns {
            check_index("state", turn.state.0, self.states)?;
            check_index("subgoal", turn.subgoal.0, self.options)?;
        }
        if let EpisodeEnd::Truncated { final_state } = traj.end {
            check_index("final state", final_state.0, self.states)?;
        }
        Ok(())
    }
}

/// State-only value table used by the flat baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatValues {
    pub values: Vec<f64>,
}

impl FlatValues {
    pub fn zeros(states: usize) -> Self {
        Self { values: vec![0.0; states] }
    }

    pub fn get(&self, s: State) -> f64 {
        self.values[s.0]
    }

    fn check(&self, traj: &Trajectory) -> Result<(), CriticError> {
        for turn in &traj.turns {
            check_index("state", turn.state.0, self.values.len())?;
        }
        if let EpisodeEnd::Truncated { final_state } = traj.end {
            check_index("final state", final_state.0, self.values.len())?;
        }
        Ok(())
    }
}

fn check_index(what: &'static str, index: usize, bound: usize) -> Result<(), CriticError> {
    if index < bound {
        Ok(())
    } else {
        Err(CriticError::Index { what, index, bound })
    }
}

/// Per-segment and per-turn regression targets of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTargets {
    pub high: Vec<f64>,
    pub low: Vec<f64>,
}

/// State at the next boundary after the segment ending at `end`, or `None`
/// when the episode terminated there.
fn boundary_state(traj: &Trajectory, end: usize) -> Option<State> {
    if end < traj.len() {
        Some(traj.turns[end].state)
    } else {
        match traj.end {
            EpisodeEnd::Terminal => None,
            EpisodeEnd::Truncated { final_state } => Some(final_state),
        }
    }
}

/// Where the bootstrap value of turn `t` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bootstrap {
    /// `V_high` at the next boundary state.
    High(State),
    /// `V_low(s_{t+1}, o_k)` inside the segment.
    Low(State, SubgoalId),
    /// Terminal: value 0.
    Zero,
}

pub(crate) fn bootstrap_of(traj: &Trajectory, seg: &Segmentation, t: usize) -> Bootstrap {
    let end = seg.segment_end(t);
    if t + 1 == end {
        boundary_state(traj, end).map_or(Bootstrap::Zero, Bootstrap::High)
    } else {
        Bootstrap::Low(traj.turns[t + 1].state, traj.turns[t].subgoal)
    }
}

fn bootstrap_value(tables: &ValueTables, b: Bootstrap) -> f64 {
    match b {
        Bootstrap::High(s) => tables.high(s),
        Bootstrap::Low(s, o) => tables.low(s, o),
        Bootstrap::Zero => 0.0,
    }
}

/// `V_next` of turn `t`.
pub fn v_next(traj: &Trajectory, tables: &ValueTables, t: usize) -> Result<f64, CriticError> {
    tables.check(traj)?;
    let seg = Segmentation::of(traj)?;
    if t >= traj.len() {
        return Err(EpisodeError::OutOfRange { t, len: traj.len() }.into());
    }
    Ok(bootstrap_value(tables, bootstrap_of(traj, &seg, t)))
}

/// `y_high[k] = r~_k + g~_k V_high(s_{b_{k+1}})`, bootstrap 0 at termination.
pub fn high_targets(
    traj: &Trajectory,
    tables: &ValueTables,
    gamma: f64,
) -> Result<Vec<f64>, CriticError> {
    tables.check(traj)?;
    let seg = Segmentation::of(traj)?;
    Ok(views_from(traj, &seg, gamma)
        .iter()
        .map(|v| {
            let next = boundary_state(traj, v.end).map_or(0.0, |s| tables.high(s));
            v.macro_reward + v.duration_discount * next
        })
        .collect())
}

/// `y_low[t] = r_t + gamma V_next(t)`.
pub fn low_targets(
    traj: &Trajectory,
    tables: &ValueTables,
    gamma: f64,
) -> Result<Vec<f64>, CriticError> {
    tables.check(traj)?;
    let seg = Segmentation::of(traj)?;
    Ok((0..traj.len())
        .map(|t| traj.turns[t].reward + gamma * bootstrap_value(tables, bootstrap_of(traj, &seg, t)))
        .collect())
}

pub fn targets(
    traj: &Trajectory,
    tables: &ValueTables,
    gamma: f64,
) -> Result<CriticTargets, CriticError> {
    Ok(CriticTargets {
        high: high_targets(traj, tables, gamma)?,
        low: low_targets(traj, tables, gamma)?,
    })
}

/// State value after turn `t` for the flat baseline.
pub(crate) fn flat_next(traj: &Trajectory, t: usize) -> Option<State> {
    if t + 1 < traj.len() {
        Some(traj.turns[t + 1].state)
    } else {
        match traj.end {
            EpisodeEnd::Terminal => None,
            EpisodeEnd::Truncated { final_state } => Some(final_state),
        }
    }
}

/// Returns-to-go `y_flat[t] = sum_k gamma^k r_{t+k} + gamma^(T-t) V_flat(s_T)`,
/// bootstrapped only at truncation.
///
/// The state table cannot see the current subgoal, so one-step targets would
/// settle on a value that mixes over the wrong subgoal distribution; full
/// returns regress to `E[G | s]`.
pub fn flat_targets(
    traj: &Trajectory,
    values: &FlatValues,
    gamma: f64,
) -> Result<Vec<f64>, CriticError> {
    values.check(traj)?;
    let tail = flat_next(traj, traj.len().saturating_sub(1)).map_or(0.0, |s| values.get(s));
    Ok(returns_to_go(traj, gamma).into_iter().map(|(c, k)| c + k * tail).collect())
}

/// One-step targets `r_t + gamma V_flat(s_{t+1})`, for flat TD errors.
pub(crate) fn flat_one_step(
    traj: &Trajectory,
    values: &FlatValues,
    gamma: f64,
) -> Result<Vec<f64>, CriticError> {
    values.check(traj)?;
    Ok((0..traj.len())
        .map(|t| traj.turns[t].reward + gamma * flat_next(traj, t).map_or(0.0, |s| values.get(s)))
        .collect())
}

/// Per turn, `(discounted reward sum to the end, gamma^(T-t))`.
fn returns_to_go(traj: &Trajectory, gamma: f64) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 1.0); traj.len()];
    let (mut c, mut k) = (0.0, 1.0);
    for t in (0..traj.len()).rev() {
        c = traj.turns[t].reward + gamma * c;
        k *= gamma;
        out[t] = (c, k);
    }
    out
}

/// Whether targets follow the tables during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMode {
    /// Recompute targets from the current tables every epoch (fitted value iteration).
    #[default]
    PerEpoch,
    /// Compute targets once from the input tables and regress to them.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub epochs: usize,
    pub mode: TargetMode,
}

/// Fitted tables plus the loss history: entry 0 is the loss before fitting,
/// entry `e` the loss after epoch `e` (each against targets from the tables
/// at that point, or the frozen targets).
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<T> {
    pub tables: T,
    pub mse_high: Vec<f64>,
    pub mse_low: Vec<f64>,
}

impl<T> FitReport<T> {
    /// Sum of both heads' losses after the last epoch.
    pub fn final_loss(&self) -> f64 {
        self.mse_high.last().copied().unwrap_or(0.0) + self.mse_low.last().copied().unwrap_or(0.0)
    }
}

/// Sufficient statistics of the samples `(weight, c, k, next)` sharing one
/// `(cell, next)` pair, where the target is `c + k * V[next]`.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    w: f64,
    wc: f64,
    wcc: f64,
    wk: f64,
    wkk: f64,
    wck: f64,
}

impl Moments {
    fn add(&mut self, weight: f64, c: f64, k: f64) {
        self.w += weight;
        self.wc += weight * c;
        self.wcc += weight * c * c;
        self.wk += weight * k;
        self.wkk += weight * k * k;
        self.wck += weight * c * k;
    }

    fn merge(&mut self, other: &Moments) {
        self.w += other.w;
        self.wc += other.wc;
        self.wcc += other.wcc;
        self.wk += other.wk;
        self.wkk += other.wkk;
        self.wck += other.wck;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BatchKind {
    Hierarchical { states: usize, options: usize },
    Flat { states: usize },
}

/// A weighted batch of regression samples whose targets are affine in the
/// tables (`c + k * V[next]`), aggregated per cell.
///
/// Trajectories can be added one at a time and partial batches merged, so an
/// exact trajectory distribution can be streamed in; each fitting epoch then
/// costs time proportional to the number of distinct `(cell, next)` pairs.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    kind: BatchKind,
    gamma: f64,
    groups: Vec<HashMap<Option<usize>, Moments>>,
    samples: usize,
}

impl TargetBatch {
    /// Empty batch for the two-head critic; cells are `high[s]` then `low[s][o]`.
    pub fn hierarchical(shape: &ValueTables, gamma: f64) -> Self {
        let kind = BatchKind::Hierarchical { states: shape.states, options: shape.options };
        Self::empty(kind, gamma)
    }

    /// Empty batch for the state-only critic.
    pub fn flat(shape: &FlatValues, gamma: f64) -> Self {
        Self::empty(BatchKind::Flat { states: shape.values.len() }, gamma)
    }

    fn empty(kind: BatchKind, gamma: f64) -> Self {
        let cells = match kind {
            BatchKind::Hierarchical { states, options } => states + states * options,
            BatchKind::Flat { states } => states,
        };
        Self { kind, gamma, groups: vec![HashMap::new(); cells], samples: 0 }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of trajectories added (counting each once regardless of weight).
    pub fn len(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    fn push(&mut self, cell: usize, weight: f64, c: f64, k: f64, next: Option<usize>) {
        let k = if next.is_some() { k } else { 0.0 };
        self.groups[cell].entry(next).or_default().add(weight, c, k);
    }

    /// Adds every regression sample of `traj` with the given weight.
    pub fn add(&mut self, traj: &Trajectory, weight: f64) -> Result<(), CriticError> {
        match self.kind {
            BatchKind::Hierarchical { states, options } => {
                let shape = ValueTables { states, options, high: Vec::new(), low: Vec::new() };
                shape.check(traj)?;
                let seg = Segmentation::of(traj)?;
                for view in views_from(traj, &seg, self.gamma) {
                    let cell = shape.high_cell(traj.turns[view.start].state);
                    let next = boundary_state(traj, view.end).map(|s| shape.high_cell(s));
                    self.push(cell, weight, view.macro_reward, view.duration_discount, next);
                }
                for (t, turn) in traj.turns.iter().enumerate() {
                    let cell = shape.low_cell(turn.state, turn.subgoal);
                    let next = match bootstrap_of(traj, &seg, t) {
                        Bootstrap::High(s) => Some(shape.high_cell(s)),
                        Bootstrap::Low(s, o) => Some(shape.low_cell(s, o)),
                        Bootstrap::Zero => None,
                    };
                    self.push(cell, weight, turn.reward, self.gamma, next);
                }
            }
            BatchKind::Flat { states } => {
                FlatValues { values: vec![0.0; states] }.check(traj)?;
                let next = flat_next(traj, traj.len().saturating_sub(1)).map(|s| s.0);
                for (turn, (c, k)) in traj.turns.iter().zip(returns_to_go(traj, self.gamma)) {
                    self.push(turn.state.0, weight, c, k, next);
                }
            }
        }
        self.samples += 1;
        Ok(())
    }

    /// Folds `other` (same shape and gamma) into `self`.
    pub fn merge(&mut self, other: TargetBatch) -> Result<(), CriticError> {
        if self.kind != other.kind || self.gamma != other.gamma {
            return Err(CriticError::Shape {
                expected: self.shape_pair(),
                found: other.shape_pair(),
            });
        }
        for (mine, theirs) in self.groups.iter_mut().zip(other.groups) {
            for (next, m) in theirs {
                mine.entry(next).or_default().merge(&m);
            }
        }
        self.samples += other.samples;
        Ok(())
    }

    fn shape_pair(&self) -> (usize, usize) {
        match self.kind {
            BatchKind::Hierarchical { states, options } => (states, options),
            BatchKind::Flat { states } => (states, 0),
        }
    }

    /// Cells that received at least one sample with positive weight.
    pub fn visited(&self) -> Vec<bool> {
        self.groups.iter().map(|g| g.values().any(|m| m.w > 0.0)).collect()
    }

    fn compile(&self) -> LinearTargets {
        let groups: Vec<Vec<(Option<usize>, Moments)>> = self
            .groups
            .iter()
            .map(|map| {
                let mut g: Vec<_> = map.iter().map(|(n, m)| (*n, *m)).collect();
                g.sort_by_key(|(n, _)| *n);
                g
            })
            .collect();
        let weight = groups.iter().map(|g| g.iter().map(|(_, m)| m.w).sum()).collect();
        LinearTargets { weight, groups }
    }
}

struct LinearTargets {
    weight: Vec<f64>,
    groups: Vec<Vec<(Option<usize>, Moments)>>,
}

impl LinearTargets {
    /// Weighted mean target of `cell` under `values`.
    fn mean_target(&self, cell: usize, values: &[f64]) -> f64 {
        let total: f64 = self.groups[cell]
            .iter()
            .map(|(next, m)| m.wc + next.map_or(0.0, |n| m.wk * values[n]))
            .sum();
        total / self.weight[cell]
    }

    /// Weighted squared error of `cells` against targets evaluated at `target_values`.
    fn sse(&self, cells: std::ops::Range<usize>, values: &[f64], target_values: &[f64]) -> (f64, f64) {
        let mut sse = 0.0;
        let mut weight = 0.0;
        for cell in cells {
            let v = values[cell];
            for (next, m) in &self.groups[cell] {
                let b = next.map_or(0.0, |n| target_values[n]);
                // sum w (v - c - k b)^2 expanded in moments
                sse += m.w * v * v - 2.0 * v * (m.wc + b * m.wk)
                    + m.wcc
                    + 2.0 * b * m.wck
                    + b * b * m.wkk;
                weight += m.w;
            }
        }
        (sse.max(0.0), weight)
    }

    fn fit(&self, values: &mut [f64], split: usize, cfg: &FitConfig) -> (Vec<f64>, Vec<f64>) {
        let n = values.len();
        let frozen = values.to_vec();
        let mse = |values: &[f64]| -> (f64, f64) {
            let targets_from = match cfg.mode {
                TargetMode::PerEpoch => values,
                TargetMode::Frozen => &frozen[..],
            };
            let (sa, wa) = self.sse(0..split, values, targets_from);
            let (sb, wb) = self.sse(split..n, values, targets_from);
            (if wa > 0.0 { sa / wa } else { 0.0 }, if wb > 0.0 { sb / wb } else { 0.0 })
        };
        let mut first = Vec::with_capacity(cfg.epochs + 1);
        let mut second = Vec::with_capacity(cfg.epochs + 1);
        let (a, b) = mse(values);
        first.push(a);
        second.push(b);
        let mut means = vec![f64::NAN; n];
        for _ in 0..cfg.epochs {
            let source: &[f64] = match cfg.mode {
                TargetMode::PerEpoch => values,
                TargetMode::Frozen => &frozen,
            };
            for (cell, mean) in means.iter_mut().enumerate() {
                if self.weight[cell] > 0.0 {
                    *mean = self.mean_target(cell, source);
                }
            }
            for (v, &mean) in values.iter_mut().zip(&means) {
                if !mean.is_nan() {
                    *v -= cfg.lr * (*v - mean);
                }
            }
            let (a, b) = mse(values);
            first.push(a);
            second.push(b);
        }
        (first, second)
    }
}

/// Squared-error regression of both heads toward their bootstrapped targets.
///
/// Each epoch moves every visited cell by `lr` times the gradient of half the
/// cell's mean squared residual, i.e. `v <- v - lr (v - mean target)`;
/// `lr = 1` is an exact regression step.
pub fn fit_batch(
    tables: &ValueTables,
    batch: &TargetBatch,
    cfg: &FitConfig,
) -> Result<FitReport<ValueTables>, CriticError> {
    let expected = BatchKind::Hierarchical { states: tables.states, options: tables.options };
    if batch.kind != expected {
        return Err(CriticError::Shape {
            expected: (tables.states, tables.options),
            found: batch.shape_pair(),
        });
    }
    let mut values = tables.flat();
    let (mse_high, mse_low) = batch.compile().fit(&mut values, tables.states, cfg);
    let mut out = tables.clone();
    out.assign_flat(&values);
    Ok(FitReport { tables: out, mse_high, mse_low })
}

pub fn fit_critic(
    tables: &ValueTables,
    batch: &[Trajectory],
    gamma: f64,
    cfg: &FitConfig,
) -> Result<FitReport<ValueTables>, CriticError> {
    let mut compiled = TargetBatch::hierarchical(tables, gamma);
    for traj in batch {
        compiled.add(traj, 1.0)?;
    }
    fit_batch(tables, &compiled, cfg)
}

/// State-only analogue of [`fit_batch`]; the report's `mse_high` holds the
/// flat loss and `mse_low` is empty.
pub fn fit_flat_batch(
    values: &FlatValues,
    batch: &TargetBatch,
    cfg: &FitConfig,
) -> Result<FitReport<FlatValues>, CriticError> {
    let n = values.values.len();
    if batch.kind != (BatchKind::Flat { states: n }) {
        return Err(CriticError::Shape { expected: (n, 0), found: batch.shape_pair() });
    }
    let mut out = values.values.clone();
    let (mse, _) = batch.compile().fit(&mut out, n, cfg);
    Ok(FitReport { tables: FlatValues { values: out }, mse_high: mse, mse_low: Vec::new() })
}

pub fn fit_flat_critic(
    values: &FlatValues,
    batch: &[Trajectory],
    gamma: f64,
    cfg: &FitConfig,
) -> Result<FitReport<FlatValues>, CriticError> {
    let mut compiled = TargetBatch::flat(values, gamma);
    for traj in batch {
        compiled.add(traj, 1.0)?;
    }
    fit_flat_batch(values, &compiled, cfg)
}
