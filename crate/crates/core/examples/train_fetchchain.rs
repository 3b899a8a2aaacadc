//! Hierarchical PPO against the flat baseline on FetchChain(5, 20).
//!
//! `cargo run --release --example train_fetchchain [ITERATIONS] [SEED]`

use planexec::env::FetchChain;
use planexec::trainer::{train, train_flat_baseline, MetricsRow, PpoConfig, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let env = FetchChain::new(5, 20)?;
    let cfg = PpoConfig { iterations, seed, ..PpoConfig::default() };

    let mut print = |_: &TrainState, row: &MetricsRow| {
        if row.iter.is_multiple_of(10) {
            println!(
                "  iter {:>3} success {:.2} return {:>6.2} segments {:.2} seg len {:.2} switch rate {:.2}",
                row.iter, row.success, row.mean_return, row.mean_segments, row.mean_seg_len, row.switch_rate
            );
        }
        Ok(())
    };
    println!("hierarchical");
    let h = train(&env, &cfg, &mut print)?;
    println!("flat");
    let f = train_flat_baseline(&env, &cfg, &mut print)?;
    for (name, out) in [("hierarchical", &h), ("flat", &f)] {
        let first = out.evals.iter().find(|e| e.success >= 0.9).map(|e| e.iter);
        println!("{name}: greedy success {:.2}, first >= 0.9 at {first:?}", out.evals.last().map_or(0.0, |e| e.success));
    }
    Ok(())
}
