//! Exact and bootstrapped variances of execution and flat advantages per turn.
//!
//! `cargo run --release --example variance [SAMPLES]`

use planexec::verify::{variance_reduction, ChainSetup};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let check = variance_reduction(&ChainSetup::default(), samples, 200, &[1])?;
    println!("{:>2} {:>8} {:>10} {:>10}   {:>24}", "t", "reach", "Var low", "Var flat", "95% CI of difference");
    for (e, cell) in check.exact.iter().zip(&check.cells) {
        println!(
            "{:>2} {:>8.4} {:>10.4} {:>10.4}   [{:>10.4}, {:>10.4}]",
            e.t, e.reach, e.var_low, e.var_flat, cell.report.ci_diff.0, cell.report.ci_diff.1
        );
    }
    let eq = &check.equality;
    println!("subgoal-independent case: Var low {:.4} vs flat {:.4}, overlapping {}", eq.var_low, eq.var_flat, eq.overlapping());
    Ok(())
}
