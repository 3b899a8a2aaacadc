//! Samples a few episodes from a random tabular policy on FetchChain and
//! prints them as trajectory JSON lines.
//!
//! `cargo run --example policy_rollout [SEED]`

use planexec::env::{EnvModel, FetchChain};
use planexec::jsonl::write_trajectories;
use planexec::policy::{rollout, Dims, PolicyParams};
use planexec::rng::{stream, EpisodeKey};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let env = FetchChain::new(4, 12)?;
    let params = PolicyParams::random(Dims::for_env(&env, 2), 1.0, &mut stream(seed, 1));
    let batch = (0..3)
        .map(|i| rollout(&env, &params, env.horizon(), EpisodeKey::new(seed, i), 0.3))
        .collect::<Result<Vec<_>, _>>()?;
    for traj in &batch {
        let qs: String = traj.turns.iter().map(|t| if t.switch.is_switch() { 'S' } else { 'k' }).collect();
        eprintln!("episode {}: {} turns, raw return {:.1}, switches {qs}", traj.seed, traj.len(), traj.raw_return());
    }
    write_trajectories(&mut std::io::stdout().lock(), &batch)?;
    Ok(())
}
