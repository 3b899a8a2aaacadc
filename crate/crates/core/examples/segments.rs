//! Segment structure of a hand-written episode: boundaries, macro-steps and
//! returns-to-go.

use planexec::episode::{
    returns_to_go, segment_boundaries, segment_views, ActionId, EpisodeEnd, State, SubgoalId, Switch, Trajectory,
    TurnRecord,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // (q, subgoal, reward): three segments of lengths 3, 1 and 2.
    let plan = [(1, 0, 0.0), (0, 0, 0.0), (0, 0, 1.0), (1, 1, 0.0), (1, 0, 0.0), (0, 0, 10.0)];
    let mut turns: Vec<TurnRecord> = Vec::new();
    for (t, &(q, o, r)) in plan.iter().enumerate() {
        let prev = turns.last().map(|x| x.subgoal);
        let switch = Switch::from_q(q).expect("0 or 1");
        turns.push(TurnRecord::new(t, State(t), prev, switch, SubgoalId(o), ActionId(0), r));
    }
    turns.last_mut().expect("non-empty").done = true;
    let traj = Trajectory { turns, end: EpisodeEnd::Terminal, seed: 0 };
    traj.validate()?;

    let gamma = 0.9;
    println!("boundaries {:?}", segment_boundaries(&traj)?);
    for v in segment_views(&traj, gamma)? {
        println!(
            "segment {} [{}, {}) subgoal {}: macro reward {:.4}, duration discount {:.4}",
            v.k, v.start, v.end, v.subgoal.0, v.macro_reward, v.duration_discount
        );
    }
    let g: Vec<String> = returns_to_go(&traj, gamma).iter().map(|x| format!("{x:.3}")).collect();
    println!("returns-to-go {}", g.join(" "));
    Ok(())
}
