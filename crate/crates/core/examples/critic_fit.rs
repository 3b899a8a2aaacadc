//! Fits the two-head critic on sampled episodes of a frozen random policy and
//! compares it with the enumerated values.

use planexec::critic::{fit_critic, FitConfig, TargetMode, ValueTables};
use planexec::env::{EnvModel, FetchChain};
use planexec::oracle::{oracle_values, EnumerationConfig};
use planexec::policy::{rollout, Dims, PolicyParams};
use planexec::rng::{stream, EpisodeKey};

/// Largest error over cells visited at least 30 times.
fn sup(oracle: &[Option<f64>], fitted: &[f64], visits: &[usize]) -> f64 {
    oracle
        .iter()
        .zip(fitted)
        .zip(visits)
        .filter_map(|((o, f), &n)| o.filter(|_| n >= 30).map(|o| (o - f).abs()))
        .fold(0.0, f64::max)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (gamma, horizon) = (0.95, 6);
    let env = FetchChain::timed(3, horizon)?;
    let params = PolicyParams::random(Dims::for_env(&env, 2), 1.0, &mut stream(1, 1));
    let exact = oracle_values(&env, &params, &EnumerationConfig::new(horizon), gamma)?;

    for episodes in [100, 1000, 10_000] {
        let batch = (0..episodes)
            .map(|i| rollout(&env, &params, horizon, EpisodeKey::new(3, i as u64), 0.0))
            .collect::<Result<Vec<_>, _>>()?;
        let mut high_seen = vec![0usize; env.n_states()];
        let mut low_seen = vec![0usize; env.n_states() * 2];
        for traj in &batch {
            for turn in &traj.turns {
                high_seen[turn.state.0] += usize::from(turn.switch.is_switch());
                low_seen[turn.state.0 * 2 + turn.subgoal.0] += 1;
            }
        }
        let cfg = FitConfig { lr: 1.0, epochs: 50, mode: TargetMode::PerEpoch };
        let fit = fit_critic(&ValueTables::zeros(env.n_states(), 2), &batch, gamma, &cfg)?;
        println!(
            "{episodes:>6} episodes: sup error on well-visited cells high {:.4}, low {:.4}; final loss high {:.4}",
            sup(&exact.high, &fit.tables.high, &high_seen),
            sup(&exact.low, &fit.tables.low, &low_seen),
            fit.mse_high.last().copied().unwrap_or_default()
        );
    }
    Ok(())
}
