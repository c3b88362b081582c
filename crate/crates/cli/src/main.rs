use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blockseq::agent::AgentMode;
use blockseq::env::EnvKind;
use blockseq::harness::diagnostics::{self, Proposal, GRADCHECK_STEP};
use blockseq::harness::{
    compare_dirs, parse_pairs, render_table, write_comparison_csv, Checkpoint, EvalPolicy, TrainConfig, Trainer,
};
use blockseq::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "blockseq", version, about = "Blockwise sequential model learning for POMDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one agent per seed and write log.csv and checkpoint.bin.
    Train(TrainArgs),
    /// Evaluate a checkpoint with frozen parameters and write eval.csv.
    Eval(EvalArgs),
    /// One-sided Welch tests between sets of runs.
    Compare(CompareArgs),
    /// Finite-difference checks of every network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimator consistency checks on the linear-Gaussian oracle.
    Oracle {
        /// Seeds per sample count.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 10_000)]
        batches: usize,
    },
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    agent: Option<AgentMode>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds, run one after another into `OUT/seed-N`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Also write a checkpoint every N completed episodes.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Stop after this many more completed episodes, leaving a checkpoint
    /// that `--resume` continues from.
    #[arg(long)]
    episodes: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "env", "agent", "seeds", "overrides"])]
    resume: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PolicyArg {
    Agent,
    Random,
    Zero,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    /// Run directory holding checkpoint.bin; eval.csv is written here.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Expected environment; a checkpoint for another one is rejected.
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyArg::Agent)]
    policy: PolicyArg,
    /// Override the sequential task radius, e.g. to test at another scale.
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(clap::Args, Debug)]
struct CompareArgs {
    /// Directories of runs, one per method; searched recursively.
    #[arg(required = true, num_args = 2..)]
    dirs: Vec<PathBuf>,
    #[arg(long, default_value = "avg_return_100")]
    metric: String,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Oracle { seeds, batches } => oracle(seeds, batches),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn config_pairs(a: &TrainArgs) -> Result<Vec<(String, String)>> {
    let mut pairs = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    if let Some(env) = a.env {
        pairs.push(("env.kind".into(), env.name().into()));
    }
    if let Some(agent) = a.agent {
        pairs.push(("agent.mode".into(), agent.name().into()));
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn train(a: TrainArgs) -> Result<()> {
    if let Some(path) = &a.resume {
        let trainer = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
        return run_training(trainer, &a.out, &a);
    }
    let pairs = config_pairs(&a)?;
    let base = TrainConfig::from_pairs(&pairs)?;
    if a.seeds.is_empty() {
        let mut cfg = base;
        if let Some(seed) = a.seed {
            cfg.seed = seed;
        }
        return run_training(Trainer::new(cfg)?, &a.out, &a);
    }
    for &seed in &a.seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        run_training(Trainer::new(cfg)?, &a.out.join(format!("seed-{seed}")), &a)?;
    }
    Ok(())
}

fn run_training(mut tr: Trainer, out: &Path, a: &TrainArgs) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), tr.cfg.to_text())?;
    tr.set_dump_dir(Some(out.to_path_buf()));
    eprintln!(
        "training {} on {} (seed {}, {} steps) into {}",
        tr.cfg.agent.mode.name(),
        tr.cfg.env.kind.name(),
        tr.cfg.seed,
        tr.cfg.schedule.max_steps,
        out.display()
    );
    let every = a.checkpoint_every.filter(|n| *n > 0);
    let stop = a.episodes.map(|n| tr.episodes() + n);
    while !tr.is_finished() && stop.is_none_or(|s| tr.episodes() < s) {
        let left = stop.map_or(u64::MAX, |s| s - tr.episodes());
        tr.run_episodes(every.unwrap_or(u64::MAX).min(left))?;
        tr.write_log(&out.join("log.csv"))?;
        if every.is_some() && tr.at_episode_boundary() {
            tr.checkpoint()?.save(&out.join(CHECKPOINT_FILE))?;
        }
    }
    tr.write_log(&out.join("log.csv"))?;
    tr.checkpoint()?.save(&out.join(CHECKPOINT_FILE))?;
    let avg = tr.avg_return_100().map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!("seed {}: {} episodes, avg_return_100 {avg}", tr.cfg.seed, tr.episodes());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let path = a.checkpoint.clone().unwrap_or_else(|| a.out.join(CHECKPOINT_FILE));
    let tr = Trainer::from_checkpoint(&Checkpoint::load(&path)?)?;
    if let Some(env) = a.env {
        if env != tr.cfg.env.kind {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained on {}, not {}",
                tr.cfg.env.kind.name(),
                env.name()
            )));
        }
    }
    let mut env_cfg = tr.cfg.env.clone();
    if let Some(r) = a.radius {
        env_cfg.r = r;
        env_cfg.validate()?;
    }
    let policy = match a.policy {
        PolicyArg::Agent => EvalPolicy::Agent { deterministic: a.deterministic },
        PolicyArg::Random => EvalPolicy::Random,
        PolicyArg::Zero => EvalPolicy::Zero,
    };
    let report = blockseq::harness::evaluate_with(&env_cfg, &tr.agent, tr.model.as_ref(), policy, a.episodes, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut w = fs::File::create(a.out.join("eval.csv"))?;
    writeln!(w, "episodes,mean_return,success_rate,successes,deterministic,seed")?;
    writeln!(
        w,
        "{},{},{},{},{},{}",
        a.episodes,
        report.mean_return(),
        report.success_rate(),
        report.successes,
        a.deterministic,
        a.seed
    )?;
    println!(
        "mean_return {:.4}  success_rate {:.4} ({} / {})",
        report.mean_return(),
        report.success_rate(),
        report.successes,
        a.episodes
    );
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let rows = compare_dirs(&a.dirs, &a.metric)?;
    print!("{}", render_table(&rows, &a.metric));
    if let Some(path) = &a.out {
        write_comparison_csv(fs::File::create(path)?, &rows)?;
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let lines = diagnostics::gradcheck_suite(seed)?;
    let mut failed = 0;
    for l in &lines {
        let ok = l.max_rel_error < GRADCHECK_TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{:<4} {:<36} max rel error {:.3e} over {} entries",
            if ok { "ok" } else { "FAIL" },
            l.network,
            l.max_rel_error,
            l.entries
        );
    }
    println!("step {GRADCHECK_STEP:e}, tolerance {GRADCHECK_TOLERANCE:e}");
    if failed > 0 {
        return Err(Error::Data(format!("{failed} network(s) failed the gradient check")));
    }
    Ok(())
}

fn oracle(seeds: u64, batches: usize) -> Result<()> {
    let ks = [10, 100, 1000, 10_000];
    let lines = diagnostics::generative_consistency(&ks, seeds, Proposal::MISMATCHED)?;
    let exact = diagnostics::generative_consistency(&ks, seeds, Proposal::EXACT)?;
    println!("generative gradient, median relative error over {seeds} seeds");
    println!("  {:>6}  {:>10}  {:>14}", "K_sp", "mismatched", "exact (info)");
    for (l, e) in lines.iter().zip(&exact) {
        println!("  {:>6}  {:>10.4}  {:>14.4}", l.k_sp, l.median_rel_error, e.median_rel_error);
    }
    let monotone = lines.windows(2).all(|w| w[1].median_rel_error < w[0].median_rel_error);
    let last = lines.last().map_or(f64::INFINITY, |l| l.median_rel_error);
    let stat = diagnostics::inference_stationarity(batches, 10, 0)?;
    println!(
        "inference gradient at the exact posterior: |mean| {:.3e}, standard error {:.3e} ({batches} batches)",
        stat.mean_norm(),
        stat.se_norm()
    );
    let ok = monotone && last < 0.02 && stat.mean_norm() < 3.0 * stat.se_norm();
    println!("{}", if ok { "ok" } else { "FAIL" });
    if !ok {
        return Err(Error::Data("estimator checks failed".into()));
    }
    Ok(())
}
