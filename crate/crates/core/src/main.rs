use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use aspmcp::analysis::{coverage, coverage_svg, gradcheck, COVERAGE_CELL, DEFAULT_SKILLS};
use aspmcp::asp::{load_primitives, pretrain, PretrainState};
use aspmcp::checkpoint::Checkpoint;
use aspmcp::config::{required, Overrides, RunConfig};
use aspmcp::downstream::{
    evaluate, train_orchestrator, train_scratch, write_results_csv, Agent, AgentKind,
};
use aspmcp::env::{TaskSpec, Variant};
use aspmcp::policy::CompositePolicy;
use aspmcp::ppo::write_metrics_csv;
use aspmcp::{Error, Result, SimRng};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;
const DEFAULT_EVAL_EPISODES: usize = 100;
const DEFAULT_K: usize = 4;

#[derive(Parser)]
#[command(name = "aspmcp", version, about = "Self-play pretraining of composable primitives and their reuse")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Asymmetric self-play pretraining; writes stage checkpoints and logs.
    Pretrain(Common),
    /// Trains one downstream agent on one task and evaluates it.
    Train(Common),
    /// Evaluates an agent or pretraining checkpoint on downstream tasks.
    Eval(Common),
    /// Workspace coverage of random primitive compositions.
    Coverage(Common),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Environment-step budget.
    #[arg(long)]
    budget: Option<u64>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Pretrain(c) => ("pretrain", c),
            Command::Train(c) => ("train", c),
            Command::Eval(c) => ("eval", c),
            Command::Coverage(c) => ("coverage", c),
            Command::Gradcheck(c) => ("gradcheck", c),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = cli.command.parts();
    match load_config(name, common).and_then(|cfg| run(name, &cfg)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            })
        }
    }
}

fn load_config(command: &str, c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(
        command,
        &Overrides {
            seed: c.seed,
            out: c.out.clone(),
            checkpoint: c.checkpoint.clone(),
            task: c.task.clone(),
            budget: c.budget,
        },
    );
    Ok(cfg)
}

/// Returns whether the command's own check passed.
fn run(command: &str, cfg: &RunConfig) -> Result<bool> {
    let seed = cfg.seed()?;
    let dir = cfg.run_dir(command)?;
    match command {
        "pretrain" => cmd_pretrain(cfg, seed, &dir),
        "train" => cmd_train(cfg, seed, &dir),
        "eval" => cmd_eval(cfg, seed, &dir),
        "coverage" => cmd_coverage(cfg, seed, &dir),
        _ => cmd_gradcheck(seed, &dir),
    }
}

fn prepare(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("config.toml"), text)?;
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<bool> {
    let pcfg = cfg.pretrain_config()?;
    prepare(dir, cfg)?;
    let state = match &cfg.pretrain.resume {
        Some(p) => PretrainState::from_checkpoint(&Checkpoint::load(p)?, &pcfg)?,
        None => PretrainState::fresh(&pcfg, SimRng::seed_from_u64(seed))?,
    };
    let (state, outputs) = pretrain(&pcfg, state, dir)?;
    println!(
        "steps: {}  Bob steps: {}  proposals: {}",
        state.steps,
        state.bob_steps,
        state.records.len()
    );
    for (f, p) in &outputs.stages {
        println!("stage {f}: {}", p.display());
    }
    if let Some(p) = &outputs.primitives {
        println!("primitives: {}", p.display());
    }
    Ok(true)
}

fn cmd_train(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<bool> {
    let variant = cfg.train_task()?;
    let kind = cfg.train_agent()?;
    let dcfg = cfg.downstream_config()?;
    let checkpoint = if kind.needs_pretraining() {
        Some(required(&cfg.train.checkpoint, "train.checkpoint")?)
    } else {
        None
    };
    prepare(dir, cfg)?;
    let task = TaskSpec::new(variant);
    let mut rng = SimRng::seed_from_u64(seed);
    let (agent, rows) = match (kind, checkpoint) {
        (AgentKind::FrozenPrimitivesOrchestrator, Some(ck)) => {
            let prims = load_primitives(&ck)?;
            let before = prims.fingerprint();
            let (orch, rows) = train_orchestrator(&prims, &task, &dcfg, &mut rng)?;
            println!("primitives fingerprint: {before}");
            (Agent::Gaussian(orch), rows)
        }
        (AgentKind::AspOnly, Some(ck)) => {
            let bob = CompositePolicy::load(&Checkpoint::load(&ck)?, "bob")?;
            (Agent::Composite(bob), Vec::new())
        }
        (kind, _) => train_scratch(kind, &task, &dcfg, cfg.train.k.unwrap_or(DEFAULT_K), &mut rng)?,
    };
    agent.to_checkpoint(kind, variant).save(&dir.join("agent.ckpt"))?;
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    fs::write(dir.join("metrics.csv"), &buf)?;
    let episodes = cfg.train.eval_episodes.unwrap_or(DEFAULT_EVAL_EPISODES);
    let report = evaluate(&agent, kind.name(), &task, episodes, seed, &mut rng)?;
    buf.clear();
    write_results_csv(&mut buf, std::slice::from_ref(&report))?;
    fs::write(dir.join("results.csv"), &buf)?;
    println!(
        "{} on {}: success {:.3} over {} episodes",
        kind,
        variant,
        report.success_rate,
        report.n_episodes
    );
    Ok(true)
}

fn cmd_eval(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<bool> {
    let ck = required(&cfg.eval.checkpoint, "eval.checkpoint")?;
    let tasks = cfg.eval_tasks()?;
    let episodes = cfg.eval.episodes.unwrap_or(DEFAULT_EVAL_EPISODES);
    prepare(dir, cfg)?;
    let (kind, agent) = Agent::from_checkpoint(&Checkpoint::load(&ck)?)?;
    let mut rng = SimRng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(tasks.len());
    for v in tasks {
        let r = evaluate(&agent, kind.name(), &TaskSpec::new(v), episodes, seed, &mut rng)?;
        println!("{} on {}: success {:.3}", kind, v, r.success_rate);
        reports.push(r);
    }
    let mut buf = Vec::new();
    write_results_csv(&mut buf, &reports)?;
    fs::write(dir.join("results.csv"), &buf)?;
    Ok(true)
}

fn cmd_coverage(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<bool> {
    let ck = required(&cfg.coverage.checkpoint, "coverage.checkpoint")?;
    let n_skills = cfg.coverage.n_skills.unwrap_or(DEFAULT_SKILLS);
    let cell = cfg.coverage.cell_size.unwrap_or(COVERAGE_CELL);
    prepare(dir, cfg)?;
    let prims = load_primitives(&ck)?;
    let task = TaskSpec::new(Variant::Pretrain);
    let report = coverage(&prims, &task, n_skills, cell, &mut SimRng::seed_from_u64(seed))?;
    fs::write(
        dir.join("coverage.csv"),
        format!(
            "n_skills,cell_size,visited_cells,total_cells,visited_fraction\n{},{},{},{},{}\n",
            report.n_skills, report.cell_size, report.visited_cells, report.total_cells, report.visited_fraction
        ),
    )?;
    let mut svg = Vec::new();
    coverage_svg(&mut svg, &report, &task)?;
    fs::write(dir.join("coverage.svg"), svg)?;
    println!(
        "visited {} of {} cells ({:.4})",
        report.visited_cells, report.total_cells, report.visited_fraction
    );
    Ok(true)
}

fn cmd_gradcheck(seed: u64, dir: &Path) -> Result<bool> {
    let report = gradcheck(seed, false)?;
    fs::create_dir_all(dir)?;
    let mut csv = String::from("suite,configs,worst_relative_error\n");
    for s in &report.suites {
        csv.push_str(&format!("{},{},{}\n", s.name, s.configs, s.worst));
        println!("{:<12} {:>3} configs  worst {:.3e}", s.name, s.configs, s.worst);
    }
    fs::write(dir.join("gradcheck.csv"), csv)?;
    let passed = report.passed();
    println!(
        "{} (tolerance {:.0e})",
        if passed { "PASS" } else { "FAIL" },
        report.tolerance
    );
    Ok(passed)
}
