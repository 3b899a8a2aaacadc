use planexec::checkpoint::{critic_from_str, critic_to_string, policy_from_str, policy_to_string};
use planexec::critic::ValueTables;
use planexec::episode::{
    segment_boundaries, segment_views, ActionId, BehaviorRecord, EpisodeEnd, State, SubgoalId, Switch,
    Trajectory, TurnRecord,
};
use planexec::jsonl::{read_trajectories, write_trajectories};
use planexec::parser::{
    ingest_log, parse_blocks, parse_blocks_in_context, render, LogTurn, ParsedDecision, FORMAT_PENALTY,
};
use planexec::policy::{Dims, PolicyParams};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct TurnSpec {
    switch: bool,
    new_subgoal: usize,
    state: usize,
    action: usize,
    reward: f64,
    behavior: Option<(f64, f64)>,
    valid: bool,
}

fn turn_spec() -> impl Strategy<Value = TurnSpec> {
    (any::<bool>(), 0..4usize, 0..20usize, 0..4usize, -10.0..10.0f64, proptest::option::of((-5.0..0.0f64, 0.0..1.0f64)), any::<bool>())
        .prop_map(|(switch, new_subgoal, state, action, reward, behavior, valid)| TurnSpec {
            switch,
            new_subgoal,
            state,
            action,
            reward,
            behavior,
            valid,
        })
}

fn build(specs: &[TurnSpec], truncated: Option<usize>) -> Trajectory {
    let mut turns: Vec<TurnRecord> = Vec::new();
    for (t, s) in specs.iter().enumerate() {
        let prev = turns.last().map(|x| x.subgoal);
        let switch = if t == 0 || s.switch { Switch::Switch } else { Switch::Keep };
        let subgoal = match switch {
            Switch::Keep => prev.unwrap(),
            Switch::Switch => SubgoalId(s.new_subgoal),
        };
        let mut turn = TurnRecord::new(t, State(s.state), prev, switch, subgoal, ActionId(s.action), s.reward);
        turn.subgoal_text = Some(format!("goal {}", subgoal.0));
        turn.behavior = s.behavior.map(|(logp, beta)| BehaviorRecord {
            switch_logp: (t > 0).then_some(logp / 2.0),
            subgoal_logp: switch.is_switch().then_some(logp / 3.0),
            action_logp: logp,
            beta: (t > 0).then_some(beta),
        });
        turn.format_valid = s.valid;
        turns.push(turn);
    }
    let end = match truncated {
        Some(s) => EpisodeEnd::Truncated { final_state: State(s) },
        None => {
            turns.last_mut().unwrap().done = true;
            EpisodeEnd::Terminal
        }
    };
    Trajectory { turns, end, seed: 0 }
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    (proptest::collection::vec(turn_spec(), 1..12), proptest::option::of(0..20usize))
        .prop_map(|(specs, truncated)| build(&specs, truncated))
}

fn field() -> impl Strategy<Value = String> {
    "[a-z0-9][a-z0-9 ,.'-]{0,30}[a-z0-9]"
}

fn decision() -> impl Strategy<Value = ParsedDecision> {
    (any::<bool>(), field(), field()).prop_map(|(keep, subgoal_text, action_text)| ParsedDecision {
        q: if keep { Switch::Keep } else { Switch::Switch },
        subgoal_text,
        action_text,
    })
}

proptest! {
    #[test]
    fn render_parse_round_trip(d in decision()) {
        let (back, verdict) = parse_blocks(&render(&d)).unwrap();
        prop_assert_eq!(back, d);
        prop_assert!(verdict.valid);
        prop_assert_eq!(verdict.penalty, 0.0);
    }

    #[test]
    fn penalty_is_zero_or_one_unit(text in "(<switch>|</switch>|<subgoal>|</subgoal>|<action>|</action>|KEEP|SWITCH|go| ){0,12}",
                                   prev in proptest::option::of(field())) {
        if let Ok((_, verdict)) = parse_blocks_in_context(&text, prev.as_deref()) {
            prop_assert!(verdict.penalty == 0.0 || verdict.penalty == FORMAT_PENALTY);
            prop_assert_eq!(verdict.valid, verdict.violations.is_empty());
            prop_assert_eq!(verdict.valid, verdict.penalty == 0.0);
        }
    }

    #[test]
    fn ingest_produces_valid_trajectories(
        ds in proptest::collection::vec(decision(), 1..10),
        rewards in proptest::collection::vec(-1.0..1.0f64, 10),
        drop_switch in proptest::collection::vec(any::<bool>(), 10),
        done in any::<bool>(),
    ) {
        let n = ds.len();
        let turns: Vec<LogTurn> = ds
            .iter()
            .enumerate()
            .map(|(t, d)| {
                let mut text = render(d);
                if drop_switch[t] {
                    text = text.split_once("</switch>").unwrap().1.to_string();
                }
                LogTurn::new(text, rewards[t], done && t + 1 == n)
            })
            .collect();
        let ep = ingest_log(&turns, None).unwrap();
        let traj = &ep.trajectory;
        prop_assert!(traj.validate().is_ok());
        prop_assert_eq!(traj.len(), n);
        prop_assert_eq!(traj.is_terminal(), done);
        prop_assert_eq!(traj.turns[0].switch, Switch::Switch);
        for (t, turn) in traj.turns.iter().enumerate() {
            let penalty = ep.verdicts[t].penalty;
            prop_assert!((turn.reward - (turn.raw_reward - penalty)).abs() < 1e-12);
            prop_assert_eq!(turn.format_valid, ep.verdicts[t].valid);
            prop_assert_eq!(&ep.subgoals[turn.subgoal.0], &ds[t].subgoal_text);
            if t > 0 && ds[t].subgoal_text != ds[t - 1].subgoal_text {
                prop_assert_eq!(turn.switch, Switch::Switch);
            }
        }
        let total: f64 = ep.verdicts.iter().map(|v| v.penalty).sum();
        prop_assert!((ep.penalty_total() - total).abs() < 1e-12);
        prop_assert!((total - FORMAT_PENALTY * ep.malformed_turns() as f64).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip(batch in proptest::collection::vec(trajectory(), 1..4)) {
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &batch).unwrap();
        let back = read_trajectories(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), batch.len());
        for (i, (a, b)) in back.iter().zip(&batch).enumerate() {
            prop_assert_eq!(a.seed, i as u64);
            prop_assert_eq!(&a.turns, &b.turns);
            prop_assert_eq!(a.end, b.end);
        }
    }

    #[test]
    fn segmentation_invariants(traj in trajectory(), gamma in 0.05..1.0f64) {
        let b = segment_boundaries(&traj).unwrap();
        prop_assert_eq!(b[0], 0);
        prop_assert_eq!(*b.last().unwrap(), traj.len());
        prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
        let switches: Vec<usize> = (0..traj.len()).filter(|&t| traj.turns[t].switch.is_switch()).collect();
        prop_assert_eq!(&b[..b.len() - 1], &switches[..]);

        let views = segment_views(&traj, gamma).unwrap();
        prop_assert_eq!(views.len(), b.len() - 1);
        let mut discounted = 0.0;
        let mut scale = 1.0;
        for (k, v) in views.iter().enumerate() {
            prop_assert_eq!((v.start, v.end), (b[k], b[k + 1]));
            prop_assert!(traj.turns[v.start..v.end].iter().all(|t| t.subgoal == v.subgoal));
            prop_assert!((v.duration_discount - gamma.powi(v.len() as i32)).abs() < 1e-12);
            discounted += scale * v.macro_reward;
            scale *= v.duration_discount;
        }
        prop_assert!((discounted - traj.discounted_return(gamma)).abs() < 1e-9);
    }

    #[test]
    fn policy_checkpoint_round_trip(states in 1..6usize, options in 1..4usize, actions in 1..5usize, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let dims = Dims::new(states, options, actions);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::zeros(dims);
        for v in p.switch.iter_mut().chain(&mut p.subgoal).chain(&mut p.action) {
            *v = rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-12..3));
        }
        prop_assert_eq!(policy_from_str(&policy_to_string(&p)).unwrap(), p);

        let mut tables = ValueTables::zeros(states, options);
        for v in tables.high.iter_mut().chain(&mut tables.low) {
            *v = rng.random_range(-50.0..50.0);
        }
        prop_assert_eq!(critic_from_str(&critic_to_string(&tables)).unwrap(), tables);
    }
}
