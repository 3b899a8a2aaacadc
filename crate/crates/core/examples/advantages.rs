//! Per-turn execution, switching, planning and flat advantages for one sampled
//! episode, using exact value tables.

use planexec::env::{EnvModel, FetchChain};
use planexec::hae::{estimate, GaeConfig};
use planexec::oracle::{oracle_values, EnumerationConfig};
use planexec::policy::{rollout, Dims, PolicyParams};
use planexec::rng::{stream, EpisodeKey};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gae = GaeConfig { gamma: 0.95, ..GaeConfig::default() };
    let env = FetchChain::timed(3, 6)?;
    let params = PolicyParams::random(Dims::for_env(&env, 2), 1.0, &mut stream(2, 1));
    let values = oracle_values(&env, &params, &EnumerationConfig::new(6), gae.gamma)?;
    let traj = rollout(&env, &params, env.horizon(), EpisodeKey::new(5, 0), 0.0)?;
    let adv = estimate(&traj, &values.tables(), Some(&values.flat_values()), None, &gae)?;

    println!("boundaries {:?}", adv.boundaries);
    println!("{:>2} {:>6} {:>4} {:>6} {:>9} {:>9} {:>9} {:>9}", "t", "q", "o", "r", "A_low", "A_switch", "A_high", "A_flat");
    let flat = adv.flat.as_deref().unwrap_or_default();
    for (t, turn) in traj.turns.iter().enumerate() {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{t:>2} {:>6} {:>4} {:>6.2} {:>9.4} {:>9} {:>9} {:>9.4}",
            if turn.switch.is_switch() { "SWITCH" } else { "KEEP" },
            turn.subgoal.0,
            turn.reward,
            adv.low[t],
            opt(adv.switch[t]),
            opt(adv.high_at_turn(t)),
            flat[t]
        );
    }
    Ok(())
}
