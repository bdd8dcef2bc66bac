//! `emu`: train, evaluate and compare episodic-memory MARL runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use emu_core::embedding::EmbedMode;
use emu_core::harness::{self, EnvSpec, ExperimentSpec};
use emu_core::incentive::IncentiveMode;
use emu_core::marl::{evaluate, MixerKind};
use emu_core::memory::{compute_delta, DeltaPolicy};
use emu_core::seeded_rng;

const CONFIG_ERROR: u8 = 1;
const ALL_SEEDS_FAILED: u8 = 2;

#[derive(Parser)]
#[command(name = "emu", version, about = "Episodic-memory cooperative MARL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and write metrics.
    Train(TrainArgs),
    /// Greedy evaluation of a saved checkpoint.
    Eval(EvalArgs),
    /// Print the coverage-based matching threshold (6 sigma)^k / M.
    Delta(DeltaArgs),
    /// Rank finished runs by overall win-rate.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $EMU_OUT/<label>, or runs/<label>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Environment steps per seed.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Parallel seed workers (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["gridworld"])]
    env: Option<String>,
    /// Gridworld miscoordination penalty.
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long, value_parser = ["ei", "ec", "rec", "e3b", "none"])]
    incentive: Option<String>,
    #[arg(long)]
    embed: Option<EmbedMode>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    lambda_rcon: Option<f64>,
    #[arg(long)]
    t_emb: Option<usize>,
    /// Matching threshold: a positive number or `auto`.
    #[arg(long)]
    delta: Option<DeltaPolicy>,
    /// Episodic memory capacity.
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    mixer: Option<MixerKind>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eps_anneal: Option<usize>,
    #[arg(long)]
    target_interval: Option<usize>,
    #[arg(long)]
    n_circle: Option<usize>,
    #[arg(long)]
    batch_episodes: Option<usize>,
    /// Scale of the episodic-control terms (`ec`, `rec`).
    #[arg(long)]
    lambda_ec: Option<f64>,
    #[arg(long)]
    beta_e3b: Option<f64>,
    #[arg(long)]
    lambda_e3b: Option<f64>,
    /// Allow negative episodic incentives.
    #[arg(long)]
    no_clamp: bool,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Experiment spec holding the environment (default: config.json next to
    /// the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DeltaArgs {
    /// Memory capacity M.
    #[arg(long, default_value_t = 1_000_000)]
    capacity: usize,
    /// Key dimension k.
    #[arg(long, default_value_t = 4)]
    embed_dim: usize,
    /// Spread of the normalized keys.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    /// Horizon in environment steps (default: last eval point).
    #[arg(long)]
    horizon: Option<usize>,
}

enum Failure {
    Config(anyhow::Error),
    AllSeeds(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args).map_err(Failure::from),
        Command::Delta(args) => delta(args).map_err(Failure::from),
        Command::Compare(args) => compare(args).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(CONFIG_ERROR)
        }
        Err(Failure::AllSeeds(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(ALL_SEEDS_FAILED)
        }
    }
}

fn load_json_spec(path: &Path) -> anyhow::Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn incentive_from(args: &TrainArgs, current: IncentiveMode) -> anyhow::Result<IncentiveMode> {
    let (cur_ec, cur_lambda, cur_beta) = match current {
        IncentiveMode::ConventionalEc { lambda } | IncentiveMode::RewardEc { lambda } => (lambda, 0.1, 0.01),
        IncentiveMode::E3b { lambda_e3b, beta_e3b } => (0.1, lambda_e3b, beta_e3b),
        _ => (0.1, 0.1, 0.01),
    };
    let lambda = args.lambda_ec.unwrap_or(cur_ec);
    let lambda_e3b = args.lambda_e3b.unwrap_or(cur_lambda);
    let beta_e3b = args.beta_e3b.unwrap_or(cur_beta);
    let name = match (&args.incentive, current) {
        (Some(n), _) => n.as_str(),
        (None, IncentiveMode::EpisodicIncentive) => "ei",
        (None, IncentiveMode::ConventionalEc { .. }) => "ec",
        (None, IncentiveMode::RewardEc { .. }) => "rec",
        (None, IncentiveMode::E3b { .. }) => "e3b",
        (None, IncentiveMode::None) => "none",
    };
    Ok(match name {
        "ei" => IncentiveMode::EpisodicIncentive,
        "ec" => IncentiveMode::ConventionalEc { lambda },
        "rec" => IncentiveMode::RewardEc { lambda },
        "e3b" => IncentiveMode::E3b { lambda_e3b, beta_e3b },
        "none" => IncentiveMode::None,
        other => bail!("unknown incentive `{other}`"),
    })
}

fn build_spec(args: &TrainArgs) -> anyhow::Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(path) => load_json_spec(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(label) = &args.label {
        spec.label = label.clone();
    }
    if let Some(seeds) = &args.seeds {
        spec.seeds = seeds.clone();
    }
    let run = &mut spec.run;
    if let Some(v) = args.steps {
        run.t_max = v;
    }
    if let Some(v) = args.eval_interval {
        run.eval_interval = v;
    }
    if let Some(v) = args.eval_episodes {
        run.eval_episodes = v;
    }
    if let Some(p) = args.penalty {
        match &mut spec.env {
            EnvSpec::Gridworld(c) => c.penalty_p = p,
        }
    }
    let run = &mut spec.run;
    run.incentive = incentive_from(args, run.incentive)?;
    let emb = &mut run.embedding;
    if let Some(v) = args.embed {
        emb.mode = v;
    }
    if let Some(v) = args.embed_dim {
        emb.embed_dim = v;
    }
    if let Some(v) = args.lambda_rcon {
        emb.lambda_rcon = v;
    }
    if let Some(v) = args.t_emb {
        emb.t_emb = v;
    }
    if let Some(v) = args.delta {
        run.delta = v;
    }
    if let Some(v) = args.capacity {
        run.memory_capacity = v;
    }
    let tc = &mut run.train;
    if let Some(v) = args.mixer {
        tc.mixer = v;
    }
    if let Some(v) = args.gamma {
        tc.gamma = v;
    }
    if let Some(v) = args.eps_anneal {
        tc.eps_anneal = v;
    }
    if let Some(v) = args.target_interval {
        tc.target_interval = v;
    }
    if let Some(v) = args.n_circle {
        tc.n_circle = v;
    }
    if let Some(v) = args.batch_episodes {
        tc.batch_episodes = v;
    }
    if args.no_clamp {
        tc.clamp_incentive = false;
    }
    if let Some(out) = &args.out {
        spec.out_dir = out.clone();
    } else if args.config.is_none() || args.label.is_some() {
        let root = std::env::var_os("EMU_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        spec.out_dir = root.join(&spec.label);
    }
    spec.validate()?;
    Ok(spec)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let spec = build_spec(&args)?;
    eprintln!(
        "training `{}` on {} for {} steps x {} seed(s) -> {}",
        spec.label,
        spec.env.name(),
        spec.run.t_max,
        spec.seeds.len(),
        spec.out_dir.display()
    );
    let report = harness::run_experiment(&spec, args.workers).map_err(|e| Failure::Config(e.into()))?;
    for f in &report.summary.failures {
        eprintln!("seed {} failed: {}", f.seed, f.error);
    }
    if report.all_failed() {
        return Err(Failure::AllSeeds("every seed failed".into()));
    }
    println!("{}", serde_json::to_string_pretty(&report.summary).context("serializing summary")?);
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let snapshot = harness::load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let config = match args.config {
        Some(p) => p,
        None => args
            .checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("config.json"),
    };
    let spec = load_json_spec(&config)?;
    let env = harness::build_env(&spec.env)?;
    let mut rng = seeded_rng(args.seed);
    let (win, ret) = evaluate(&env, &snapshot.agent, args.episodes, snapshot.r_thr, &mut rng)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": args.checkpoint,
            "env_steps": snapshot.env_steps,
            "episodes": args.episodes,
            "test_win_rate": win,
            "mean_test_return": ret,
        })
    );
    Ok(())
}

fn delta(args: DeltaArgs) -> anyhow::Result<()> {
    if args.capacity == 0 || args.embed_dim == 0 || !(args.sigma > 0.0) {
        bail!("need capacity >= 1, embed-dim >= 1 and sigma > 0");
    }
    println!("{}", compute_delta(args.capacity, args.embed_dim, args.sigma));
    Ok(())
}

fn compare(args: CompareArgs) -> anyhow::Result<()> {
    let rows = harness::compare(&args.runs, args.horizon)?;
    println!("{:<4} {:<24} {:>10} {:>10}  dir", "rank", "label", "mu_w", "final");
    for (i, r) in rows.iter().enumerate() {
        println!(
            "{:<4} {:<24} {:>10.4} {:>10.4}  {}",
            i + 1,
            r.label,
            r.overall_winrate,
            r.final_win_rate,
            r.dir.display()
        );
    }
    Ok(())
}
