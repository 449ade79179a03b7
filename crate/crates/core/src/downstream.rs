//! Downstream training and evaluation: orchestrators over frozen primitives
//! and the agents they are compared against.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::env::{observe, Action, RewardMode, TaskSpec, Variant, View};
use crate::error::{Error, Result};
use crate::policy::{CompositePolicy, GaussianPolicy, Policy, Primitives};
use crate::ppo::{train_iteration, EnvRunner, MetricsRow, PpoConfig, PpoLearner, ValueNet};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentKind {
    FrozenPrimitivesOrchestrator,
    ScratchMonolithic,
    ScratchMcp,
    AspOnly,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::FrozenPrimitivesOrchestrator,
        AgentKind::ScratchMonolithic,
        AgentKind::ScratchMcp,
        AgentKind::AspOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::FrozenPrimitivesOrchestrator => "orchestrator",
            AgentKind::ScratchMonolithic => "scratch_monolithic",
            AgentKind::ScratchMcp => "scratch_mcp",
            AgentKind::AspOnly => "asp_only",
        }
    }

    /// Whether the agent is built from a pretraining checkpoint.
    pub fn needs_pretraining(self) -> bool {
        matches!(self, AgentKind::FrozenPrimitivesOrchestrator | AgentKind::AspOnly)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent kind `{s}`")))
    }
}

/// A downstream agent of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Agent {
    Gaussian(GaussianPolicy),
    Composite(CompositePolicy),
}

impl Agent {
    pub fn view(&self) -> View {
        match self {
            Agent::Gaussian(p) => p.view,
            Agent::Composite(_) => View::PositionsAndGoal,
        }
    }

    pub fn mean_action(&self, obs: &[f64]) -> Result<Action> {
        match self {
            Agent::Gaussian(p) => p.mean_action(obs),
            Agent::Composite(p) => p.mean_action(obs),
        }
    }

    pub const CHECKPOINT_KIND: &'static str = "agent";

    /// A checkpoint holding the agent under `agent`, tagged with its kind and
    /// training task.
    pub fn to_checkpoint(&self, kind: AgentKind, task: Variant) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::CHECKPOINT_KIND)
            .with_meta("agent_kind", kind.name())
            .with_meta("task", task.name());
        match self {
            Agent::Gaussian(p) => {
                ck.meta.insert("policy".into(), "gaussian".into());
                p.store(&mut ck, "agent");
            }
            Agent::Composite(p) => {
                ck.meta.insert("policy".into(), "composite".into());
                p.store(&mut ck, "agent");
            }
        }
        ck
    }

    /// Reads an agent checkpoint, or treats a pretraining checkpoint as the
    /// pretrained composite policy.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(AgentKind, Agent)> {
        if ck.kind != Self::CHECKPOINT_KIND {
            return Ok((AgentKind::AspOnly, Agent::Composite(CompositePolicy::load(ck, "bob")?)));
        }
        let kind: AgentKind = ck.meta("agent_kind")?.parse()?;
        let agent = match ck.meta("policy")? {
            "gaussian" => Agent::Gaussian(GaussianPolicy::load(ck, "agent")?),
            "composite" => Agent::Composite(CompositePolicy::load(ck, "agent")?),
            other => return Err(Error::LayoutMismatch(format!("unknown policy type `{other}`"))),
        };
        Ok((kind, agent))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub ppo: PpoConfig,
    /// Environment steps of training.
    pub budget_steps: u64,
    pub n_envs: usize,
    pub hidden: Vec<usize>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            budget_steps: 200_000,
            n_envs: 8,
            hidden: vec![64, 64],
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        if self.n_envs == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("n_envs and hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Trains `policy` with PPO for the configured budget, rounded up to whole
/// rollouts. Returns one metrics row per update.
pub fn train_policy<P: Policy>(
    policy: &mut P,
    view: View,
    task: &TaskSpec,
    cfg: &DownstreamConfig,
    rng: &mut SimRng,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if policy.obs_dim() != view.dim() {
        return Err(Error::LayoutMismatch(format!(
            "policy expects {} inputs, view {view:?} has {}",
            policy.obs_dim(),
            view.dim()
        )));
    }
    let value = ValueNet::init(view, &cfg.hidden, rng)?;
    let mut learner = PpoLearner::new(policy, value, cfg.ppo.clone())?;
    let mut runners = EnvRunner::pool(task, view, RewardMode::EveryStep, cfg.n_envs)?;
    let mut rows = Vec::new();
    let mut steps = 0u64;
    while steps < cfg.budget_steps {
        let row = train_iteration(&mut learner, policy, &mut runners, rows.len(), steps, rng)?;
        steps = row.env_steps;
        rows.push(row);
    }
    Ok(rows)
}

/// Fresh gate network over frozen primitives.
pub fn train_orchestrator(
    primitives: &Primitives,
    task: &TaskSpec,
    cfg: &DownstreamConfig,
    rng: &mut SimRng,
) -> Result<(GaussianPolicy, Vec<MetricsRow>)> {
    let mut orch = GaussianPolicy::orchestrator(primitives.clone(), &cfg.hidden, rng)?;
    let rows = train_policy(&mut orch, View::PositionsAndGoal, task, cfg, rng)?;
    Ok((orch, rows))
}

/// End-to-end training without pretraining.
pub fn train_scratch(
    kind: AgentKind,
    task: &TaskSpec,
    cfg: &DownstreamConfig,
    k: usize,
    rng: &mut SimRng,
) -> Result<(Agent, Vec<MetricsRow>)> {
    match kind {
        AgentKind::ScratchMonolithic => {
            let mut p = GaussianPolicy::monolithic(View::PositionsAndGoal, &cfg.hidden, rng)?;
            let rows = train_policy(&mut p, View::PositionsAndGoal, task, cfg, rng)?;
            Ok((Agent::Gaussian(p), rows))
        }
        AgentKind::ScratchMcp => {
            let mut p = CompositePolicy::init(k, &cfg.hidden, rng)?;
            let rows = train_policy(&mut p, View::PositionsAndGoal, task, cfg, rng)?;
            Ok((Agent::Composite(p), rows))
        }
        other => Err(Error::Config(format!("{other} is not trained from scratch"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub agent: String,
    pub n_episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub seeds: Vec<u64>,
}

/// Deterministic evaluation: actions are distribution means; an episode
/// succeeds if its final state satisfies the task's success rule.
pub fn evaluate(
    agent: &Agent,
    agent_name: &str,
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
    rng: &mut SimRng,
) -> Result<EvalReport> {
    evaluate_with(|obs| agent.mean_action(obs), agent.view(), agent_name, task, n_episodes, seed, rng)
}

/// Evaluation with an arbitrary deterministic controller.
pub fn evaluate_with(
    mut act: impl FnMut(&[f64]) -> Result<Action>,
    view: View,
    agent_name: &str,
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
    rng: &mut SimRng,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut successes = 0;
    let mut total_reward = 0.0;
    for _ in 0..n_episodes {
        let (mut state, goal) = task.reset(rng)?;
        loop {
            let a = act(&observe(&state, &goal, view))?;
            let tr = task.step(&state, &a, &goal, RewardMode::EveryStep)?;
            total_reward += tr.reward;
            state = tr.state;
            if tr.done {
                successes += usize::from(tr.success);
                break;
            }
        }
    }
    Ok(EvalReport {
        task: task.variant.name().to_string(),
        agent: agent_name.to_string(),
        n_episodes,
        successes,
        success_rate: successes as f64 / n_episodes as f64,
        mean_reward: total_reward / n_episodes as f64,
        seeds: vec![seed],
    })
}

/// Zero-shot evaluation of Bob's full pretrained policy.
pub fn eval_asp_only(
    bob: &CompositePolicy,
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
    rng: &mut SimRng,
) -> Result<EvalReport> {
    evaluate(
        &Agent::Composite(bob.clone()),
        AgentKind::AspOnly.name(),
        task,
        n_episodes,
        seed,
        rng,
    )
}

pub const RESULTS_CSV_HEADER: &str = "agent,task,seed,n_episodes,successes,success_rate,mean_reward";

pub fn write_results_csv<W: Write>(mut out: W, reports: &[EvalReport]) -> std::io::Result<()> {
    writeln!(out, "{RESULTS_CSV_HEADER}")?;
    for r in reports {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.agent,
            r.task,
            seeds.join(";"),
            r.n_episodes,
            r.successes,
            r.success_rate,
            r.mean_reward
        )?;
    }
    Ok(())
}
