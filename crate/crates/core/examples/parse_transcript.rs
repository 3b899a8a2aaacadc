//! Ingests the bundled transcripts and prints their segment structure.
//!
//! `cargo run --example parse_transcript [FILE...]`

use planexec::episode::segment_boundaries;
use planexec::parser::{ingest_transcript, parse_blocks, read_transcript};

const BUNDLED: [(&str, &str); 3] = [
    ("cool_cup.txt", include_str!("../tests/fixtures/cool_cup.txt")),
    ("clean_knife.txt", include_str!("../tests/fixtures/clean_knife.txt")),
    ("shirt_shop.txt", include_str!("../tests/fixtures/shirt_shop.txt")),
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let inputs: Vec<(String, String)> = if args.is_empty() {
        BUNDLED.iter().map(|(n, t)| (n.to_string(), t.to_string())).collect()
    } else {
        args.iter()
            .map(|p| Ok((p.clone(), std::fs::read_to_string(p)?)))
            .collect::<std::io::Result<_>>()?
    };

    for (name, text) in inputs {
        // Context-free verdicts first, then the repaired episode.
        let transcript = read_transcript(&text)?;
        let clean = transcript
            .turns
            .iter()
            .filter(|t| parse_blocks(&t.text).map(|(_, v)| v.valid).unwrap_or(false))
            .count();
        let ep = ingest_transcript(&text)?;
        println!("{name}: {} turns, {clean} well-formed in isolation", ep.trajectory.len());
        println!("  boundaries {:?}", segment_boundaries(&ep.trajectory)?);
        for (turn, verdict) in ep.trajectory.turns.iter().zip(&ep.verdicts) {
            let marker = if turn.switch.is_switch() { "SWITCH" } else { "KEEP  " };
            print!("  t={:<2} {marker} o{} {:?}", turn.t, turn.subgoal.0, ep.actions[turn.action.0]);
            for v in &verdict.violations {
                print!("  [{v}, penalty {}]", verdict.penalty);
            }
            println!();
        }
        println!("  subgoals: {:?}", ep.subgoals);
        println!("  return {:.2} (raw {:.2})", ep.trajectory.discounted_return(1.0), ep.trajectory.raw_return());
    }
    Ok(())
}
