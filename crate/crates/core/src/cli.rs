//! Command-line front end. [`dispatch`] returns the process exit code:
//! 0 on success, 1 when a verification gate fails or a run errors, 2 on
//! usage or configuration errors.

use crate::checkpoint::{self, CheckpointError};
use crate::config::{load_config, parse_config, ConfigError, RunConfig};
use crate::critic::ValueTables;
use crate::env::EnvModel;
use crate::episode::segment_boundaries;
use crate::hae;
use crate::jsonl::{read_trajectories, write_advantages, write_trajectories};
use crate::parser::ingest_transcript;
use crate::policy::{rollout_with, Dims, PolicyParams, Sampling};
use crate::rng::EpisodeKey;
use crate::trainer::{
    evaluate, initial_state, train, train_flat_baseline, CriticState, EvalMode, EvalRow, MetricsRow,
    TrainOutcome, TrainState,
};
use crate::verify::{self, ChainSetup};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Greedy success rate reported as "reached" in training summaries.
pub const SUCCESS_THRESHOLD: f64 = 0.9;

#[derive(Debug, Parser)]
#[command(name = "planexec", version, about = "Hierarchical switch/subgoal/action RL: training, advantages and exact checks")]
struct Cli {
    /// Output directory; every file a command writes goes here.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `KEY=VALUE` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Hierarchical PPO with the two-head critic.
    Train,
    /// PPO baseline with a state-only critic and one joint surrogate.
    TrainFlat,
    /// Sample episodes and write them as trajectory JSON lines.
    Rollout(RolloutArgs),
    /// Per-turn advantages for a trajectory file.
    Advantages(AdvantageArgs),
    /// Ingest three-block agent transcripts.
    Parse(ParseArgs),
    /// Run one verification gate.
    Verify {
        #[command(subcommand)]
        check: Check,
    },
    /// Evaluate a saved policy.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct RolloutArgs {
    /// Policy checkpoint; the configured initial policy when absent.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    episodes: usize,
    /// Argmax actions instead of sampling.
    #[arg(long)]
    greedy: bool,
}

#[derive(Debug, Args)]
struct AdvantageArgs {
    #[arg(long)]
    trajectories: PathBuf,
    /// Two-head critic checkpoint.
    #[arg(long)]
    critic: PathBuf,
    /// Flat critic checkpoint, for `A_flat`.
    #[arg(long)]
    flat_critic: Option<PathBuf>,
    /// Policy checkpoint, for switch probabilities missing from the trajectories.
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParseArgs {
    /// Transcript files, one episode each.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Sample from the policy instead of acting greedily.
    #[arg(long)]
    sample: bool,
}

#[derive(Debug, Clone, Copy, Args)]
struct ChainArgs {
    /// Chain length of the timed FetchChain.
    #[arg(long, default_value_t = 3)]
    length: usize,
    #[arg(long, default_value_t = 6)]
    horizon: usize,
    #[arg(long, default_value_t = 2)]
    options: usize,
    /// Seed of the random policy under test.
    #[arg(long, default_value_t = 1)]
    policy_seed: u64,
    #[arg(long, default_value_t = 1.0)]
    policy_scale: f64,
}

impl ChainArgs {
    fn setup(&self) -> ChainSetup {
        ChainSetup {
            length: self.length,
            horizon: self.horizon,
            options: self.options,
            policy_seed: self.policy_seed,
            policy_scale: self.policy_scale,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Check {
    /// Lambda = 1 estimators against their telescoped closed forms.
    Telescope {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Switching advantages against brute-force switching values.
    Switching {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
    },
    /// Monte Carlo mean of the hierarchical gradient against the exact gradient.
    Unbiased {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 4.0)]
        tolerance_se: f64,
    },
    /// Execution-advantage variance against flat-advantage variance.
    Variance {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        /// Sampling seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        configs: usize,
    },
    /// Critic fitting on the exact distribution against oracle values.
    CriticFixpoint {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
    },
    /// Expected score of the policy is zero.
    Score {
        #[command(flatten)]
        chain: ChainArgs,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(ConfigError),
    Failed,
    Run(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

macro_rules! run_err {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Run(e.to_string())
            }
        }
    )*};
}
run_err!(
    std::io::Error,
    serde_json::Error,
    CheckpointError,
    crate::trainer::TrainError,
    crate::jsonl::JsonlError,
    crate::hae::HaeError,
    crate::policy::PolicyError,
    crate::episode::EpisodeError,
    crate::verify::VerifyError
);

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Failed) => 1,
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Config(e)) => {
            eprintln!("config error: {e}");
            2
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => parse_config("")?,
    };
    for set in &cli.sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {set:?}")))?;
        cfg.set(key.trim(), value, 0)?;
    }
    if let Some(seed) = cli.seed {
        cfg.ppo.seed = seed;
    }
    cfg.ppo.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_json(out: &Path, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Train => run_train(&cfg, out, false),
        Command::TrainFlat => run_train(&cfg, out, true),
        Command::Rollout(args) => run_rollout(&cfg, out, args),
        Command::Advantages(args) => run_advantages(&cfg, out, args),
        Command::Parse(args) => run_parse(out, args),
        Command::Verify { check } => run_verify(&cfg, out, check),
        Command::Eval(args) => run_eval(&cfg, out, args),
    }
}

fn save_state(dir: &Path, state: &TrainState) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    checkpoint::save_policy(&dir.join("policy.txt"), &state.params)?;
    match &state.critic {
        CriticState::TwoHead(t) => checkpoint::save_critic(&dir.join("critic.txt"), t)?,
        CriticState::Flat(v) => checkpoint::save_flat_critic(&dir.join("flat-critic.txt"), v)?,
    }
    Ok(())
}

fn first_reached(evals: &[EvalRow]) -> Option<usize> {
    evals.iter().find(|e| e.success >= SUCCESS_THRESHOLD).map(|e| e.iter)
}

fn run_train(cfg: &RunConfig, out: &Path, flat: bool) -> Result<(), CliError> {
    let env = cfg.env()?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let mut metrics = create(out, "metrics.csv")?;
    writeln!(metrics, "{}", MetricsRow::CSV_HEADER)?;
    let every = cfg.checkpoint_every;
    let mut io_error = None;
    let mut observer = |state: &TrainState, row: &MetricsRow| {
        let written = writeln!(metrics, "{}", row.csv_line()).map_err(CliError::from).and_then(|_| {
            if every > 0 && state.iteration.is_multiple_of(every) {
                save_state(&out.join("checkpoints").join(format!("iter-{:06}", state.iteration)), state)
            } else {
                Ok(())
            }
        });
        if let Err(e) = written {
            io_error = Some(e);
            return Err(crate::trainer::TrainError::Config("output failed".into()));
        }
        Ok(())
    };
    let outcome: Result<TrainOutcome, _> = if flat {
        train_flat_baseline(&env, &cfg.ppo, &mut observer)
    } else {
        train(&env, &cfg.ppo, &mut observer)
    };
    if let Some(e) = io_error {
        return Err(e);
    }
    let outcome = outcome?;
    metrics.flush()?;

    let mut evals = create(out, "eval.csv")?;
    writeln!(evals, "{}", EvalRow::CSV_HEADER)?;
    for e in &outcome.evals {
        writeln!(evals, "{}", e.csv_line())?;
    }
    evals.flush()?;
    save_state(out, &outcome.state)?;

    let sampled = evaluate(
        &outcome.state.params,
        &env,
        100,
        EvalMode::Sample { seed: cfg.ppo.seed ^ 0xe7a1 },
        cfg.ppo.c_keep,
    )?;
    let reached = first_reached(&outcome.evals);
    let summary = json!({
        "command": if flat { "train-flat" } else { "train" },
        "seed": cfg.ppo.seed,
        "iterations": outcome.metrics.len(),
        "threshold": SUCCESS_THRESHOLD,
        "first_reached": reached,
        "final_greedy_success": outcome.evals.last().map(|e| e.success),
        "final_sampled_success": sampled.success_rate,
        "final_metrics": outcome.metrics.last(),
    });
    write_json(out, "summary.json", &summary)?;
    println!(
        "{}: {} iterations, greedy success {:.3}, first reached {} at {:?}",
        if flat { "train-flat" } else { "train" },
        outcome.metrics.len(),
        outcome.evals.last().map_or(0.0, |e| e.success),
        SUCCESS_THRESHOLD,
        reached
    );
    Ok(())
}

fn load_or_initial(cfg: &RunConfig, env: &dyn EnvModel, path: Option<&Path>) -> Result<PolicyParams, CliError> {
    let params = match path {
        Some(p) => checkpoint::load_policy(p)?,
        None => initial_state(env, &cfg.ppo, false).params,
    };
    let expected = Dims::for_env(env, cfg.ppo.n_options);
    if params.dims != expected {
        return Err(CliError::Usage(format!(
            "policy dims {:?} do not match the configured environment {:?}",
            params.dims, expected
        )));
    }
    Ok(params)
}

fn run_rollout(cfg: &RunConfig, out: &Path, args: &RolloutArgs) -> Result<(), CliError> {
    let env = cfg.env()?;
    let params = load_or_initial(cfg, &env, args.policy.as_deref())?;
    let batch = (0..args.episodes)
        .map(|i| {
            let sampling = if args.greedy {
                Sampling::Greedy
            } else {
                Sampling::Stochastic(EpisodeKey::new(cfg.ppo.seed, i as u64))
            };
            rollout_with(&env, &params, env.horizon(), sampling, cfg.ppo.c_keep)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = create(out, "trajectories.jsonl")?;
    write_trajectories(&mut w, &batch)?;
    w.flush()?;
    println!("rollout: {} episodes, {} turns", batch.len(), batch.iter().map(|t| t.len()).sum::<usize>());
    Ok(())
}

fn run_advantages(cfg: &RunConfig, out: &Path, args: &AdvantageArgs) -> Result<(), CliError> {
    let batch = read_trajectories(BufReader::new(File::open(&args.trajectories)?))?;
    let tables: ValueTables = checkpoint::load_critic(&args.critic)?;
    let flat = args.flat_critic.as_deref().map(checkpoint::load_flat_critic).transpose()?;
    let policy = args.policy.as_deref().map(checkpoint::load_policy).transpose()?;
    let advs = hae::estimate_all(&batch, &tables, flat.as_ref(), policy.as_ref(), &cfg.ppo.gae)?;
    let mut w = create(out, "advantages.jsonl")?;
    write_advantages(&mut w, &advs)?;
    w.flush()?;
    println!("advantages: {} episodes", advs.len());
    Ok(())
}

#[derive(Serialize)]
struct ParsedFile {
    file: String,
    turns: usize,
    malformed: usize,
    penalty: f64,
    boundaries: Vec<usize>,
    subgoals: Vec<String>,
    violations: Vec<TurnViolations>,
}

#[derive(Serialize)]
struct TurnViolations {
    t: usize,
    violations: Vec<String>,
}

fn run_parse(out: &Path, args: &ParseArgs) -> Result<(), CliError> {
    let mut batch = Vec::new();
    let mut report = Vec::new();
    for (i, path) in args.files.iter().enumerate() {
        let text = fs::read_to_string(path)?;
        let ep = ingest_transcript(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
        let mut traj = ep.trajectory.clone();
        traj.seed = i as u64;
        report.push(ParsedFile {
            file: path.display().to_string(),
            turns: traj.len(),
            malformed: ep.malformed_turns(),
            penalty: ep.penalty_total(),
            boundaries: segment_boundaries(&traj)?,
            subgoals: ep.subgoals.clone(),
            violations: ep
                .verdicts
                .iter()
                .enumerate()
                .filter(|(_, v)| !v.valid)
                .map(|(t, v)| TurnViolations { t, violations: v.violations.iter().map(|x| x.to_string()).collect() })
                .collect(),
        });
        batch.push(traj);
    }
    let mut w = create(out, "trajectories.jsonl")?;
    write_trajectories(&mut w, &batch)?;
    w.flush()?;
    write_json(out, "parse_report.json", &report)?;
    for f in &report {
        println!("{}: {} turns, boundaries {:?}, {} malformed", f.file, f.turns, f.boundaries, f.malformed);
    }
    Ok(())
}

fn gate(out: &Path, name: &str, passed: bool, summary: String, report: &impl Serialize) -> Result<(), CliError> {
    write_json(out, &format!("verify-{name}.json"), &json!({ "check": name, "passed": passed, "report": report }))?;
    println!("verify {name}: {} ({summary})", if passed { "PASS" } else { "FAIL" });
    if passed {
        Ok(())
    } else {
        Err(CliError::Failed)
    }
}

fn run_verify(cfg: &RunConfig, out: &Path, check: &Check) -> Result<(), CliError> {
    let seed = cfg.ppo.seed;
    match check {
        Check::Telescope { trials } => {
            let r = verify::telescope(*trials, seed)?;
            let worst = r.max_low.max(r.max_high).max(r.max_switch).max(r.max_flat);
            gate(out, "telescope", r.passed(), format!("{} trials, max deviation {worst:.2e}", r.trials), &r)
        }
        Check::Switching { chain, gamma } => {
            let r = verify::switching(&chain.setup(), *gamma)?;
            gate(out, "switching", r.passed(), format!("{} contexts, max deviation {:.2e}", r.contexts, r.max_deviation), &r)
        }
        Check::Unbiased { chain, samples, tolerance_se } => {
            let r = verify::unbiasedness(&chain.setup(), *samples, seed, *tolerance_se)?;
            let summary = format!(
                "{} coordinates, max z {:.2}, {} outside {} SE",
                r.exact_se.coordinates, r.exact_se.max_z, r.exact_se.failures, tolerance_se
            );
            gate(out, "unbiased", r.passed(), summary, &r)
        }
        Check::Variance { chain, samples, bootstrap, seeds } => {
            if seeds.is_empty() {
                return Err(CliError::Usage("--seeds needs at least one seed".into()));
            }
            let r = verify::variance_reduction(&chain.setup(), *samples, *bootstrap, seeds)?;
            let summary = format!(
                "{} cells, {} with CI upper bound > 0, equality case overlapping: {}",
                r.cells.len(),
                r.failed_cells().len(),
                r.equality.overlapping()
            );
            gate(out, "variance", r.passed(), summary, &r)
        }
        Check::Gradcheck { configs } => {
            let r = verify::gradcheck(*configs, seed, 1e-5, 1e-6)?;
            let summary = format!("{} coordinates, max rel {:.2e}", r.coordinates, r.max_rel_log_prob.max(r.max_rel_loss));
            gate(out, "gradcheck", r.passed(), summary, &r)
        }
        Check::CriticFixpoint { chain, epochs, gamma, lr } => {
            let r = verify::critic_fixpoint(&chain.setup(), *gamma, *epochs, *lr, 1e-3)?;
            let summary = format!("sup-norm high {:.2e}, low {:.2e}, flat {:.2e}", r.sup_high, r.sup_low, r.sup_flat);
            gate(out, "critic-fixpoint", r.passed(), summary, &r)
        }
        Check::Score { chain } => {
            let r = verify::score_identity(&chain.setup())?;
            gate(out, "score", r.passed(), format!("max |E[score]| {:.2e}", r.max_abs), &r)
        }
    }
}

fn run_eval(cfg: &RunConfig, out: &Path, args: &EvalArgs) -> Result<(), CliError> {
    let env = cfg.env()?;
    let params = load_or_initial(cfg, &env, Some(&args.policy))?;
    let mode = if args.sample { EvalMode::Sample { seed: cfg.ppo.seed } } else { EvalMode::Greedy };
    let report = evaluate(&params, &env, args.episodes, mode, cfg.ppo.c_keep)?;
    write_json(out, "eval.json", &report)?;
    println!(
        "eval: {} episodes, success {:.3}, mean return {:.3}",
        report.episodes, report.success_rate, report.mean_return
    );
    Ok(())
}
