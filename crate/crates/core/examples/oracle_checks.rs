//! Exact checks by enumeration on a small timed FetchChain: telescoping,
//! switching exactness, the score identity, the critic fixed point and
//! finite-difference gradients.

use planexec::verify::{self, ChainSetup};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let setup = ChainSetup::default();
    let t = verify::telescope(2000, 1)?;
    println!("telescope:   passed={} max low {:.1e} high {:.1e} switch {:.1e}", t.passed(), t.max_low, t.max_high, t.max_switch);
    let s = verify::switching(&setup, 0.95)?;
    println!("switching:   passed={} {} contexts, max {:.1e}", s.passed(), s.contexts, s.max_deviation);
    let sc = verify::score_identity(&setup)?;
    println!("score:       passed={} max {:.1e}", sc.passed(), sc.max_abs);
    let f = verify::critic_fixpoint(&setup, 0.95, 500, 1.0, 1e-3)?;
    println!("fixpoint:    passed={} high {:.1e} low {:.1e} flat {:.1e}", f.passed(), f.sup_high, f.sup_low, f.sup_flat);
    let g = verify::gradcheck(20, 1, 1e-5, 1e-6)?;
    println!("gradcheck:   passed={} {} coords, max rel {:.1e}", g.passed(), g.coordinates, g.max_rel_loss.max(g.max_rel_log_prob));
    println!("terminal mass {:.12}", verify::terminal_mass(&setup)?);
    Ok(())
}
