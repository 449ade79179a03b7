//! Asymmetric self-play pretraining.
//!
//! Alice, a monolithic policy on privileged observations, acts for one
//! episode; where she leaves the object becomes a goal. Bob, a compositional
//! policy, starts from Alice's initial state and must bring the object there.
//! Alice is paid for valid goals and paid more when Bob fails, which pushes
//! her towards goals just beyond Bob's reach. When Bob fails, Alice's
//! episode is cloned into Bob.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, RngState};
use crate::env::{distance, observe, Goal, RewardMode, TaskSpec, Variant, Vec3, View};
use crate::error::{Error, Result};
use crate::nn::{LayerShape, ParamVector};
use crate::policy::{CompositePolicy, GaussianPolicy, Policy, Primitives};
use crate::ppo::{
    run_episode, write_metrics_csv, Demo, DemoQueue, Episode, MetricsRow, PpoConfig, PpoDiagnostics, PpoLearner,
    SampleBatch, ValueNet,
};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AspRewardConfig {
    pub r_valid: f64,
    pub r_difficult: f64,
    pub r_invalid: f64,
}

impl Default for AspRewardConfig {
    fn default() -> Self {
        Self {
            r_valid: 1.0,
            r_difficult: 5.0,
            r_invalid: -1.0,
        }
    }
}

/// A goal generated by Alice, with the episode that produced it.
#[derive(Debug, Clone)]
pub struct GoalProposal {
    pub s0: Vec3,
    pub sg: Vec3,
    pub demo: Episode,
    pub valid: bool,
    pub bob_succeeded: Option<bool>,
}

impl GoalProposal {
    pub fn displacement(&self) -> f64 {
        distance(self.sg, self.s0)
    }

    pub fn goal(&self) -> Goal {
        Goal { target_pos: self.sg }
    }

    /// Alice's episode as Bob would have seen it, aimed at `sg`.
    pub fn demo_for_bob(&self) -> Demo {
        let goal = self.goal();
        let view = View::PositionsAndGoal;
        let n = self.demo.actions.len();
        let mut d = Demo {
            obs_dim: view.dim(),
            raw_dim: 4,
            obs: Vec::with_capacity(n * view.dim()),
            raw: Vec::with_capacity(n * 4),
        };
        for (s, a) in self.demo.states.iter().zip(&self.demo.actions) {
            d.obs.extend(observe(s, &goal, view));
            d.raw.extend(a.to_array());
        }
        d
    }
}

/// Valid iff the goal lies in the workspace and is farther than the success
/// radius from the start.
pub fn is_valid_goal(task: &TaskSpec, s0: Vec3, sg: Vec3) -> bool {
    task.workspace.contains(sg) && distance(sg, s0) > task.workspace.d_threshold
}

pub fn alice_reward(p: &GoalProposal, r: &AspRewardConfig) -> Result<f64> {
    if !p.valid {
        return Ok(r.r_invalid);
    }
    match p.bob_succeeded {
        Some(true) => Ok(r.r_valid),
        Some(false) => Ok(r.r_valid + r.r_difficult),
        None => Err(Error::Contract("valid proposal without Bob's outcome".into())),
    }
}

/// Alice acts for one horizon from a fresh reset.
pub fn run_alice_episode<P: Policy>(
    task: &TaskSpec,
    alice: &P,
    value: &ValueNet,
    rng: &mut SimRng,
) -> Result<GoalProposal> {
    if task.variant != Variant::Pretrain {
        return Err(Error::Config(format!("Alice runs on the pretrain task, not {}", task.variant)));
    }
    let (state, goal) = task.reset(rng)?;
    let s0 = state.obj_pos;
    let mut demo = run_episode(task, state, &goal, alice, value, View::Privileged, RewardMode::Silent, rng)?;
    let sg = demo.states.last().expect("final state").obj_pos;
    // the episode ends with Alice's payout; nothing is bootstrapped past it
    if let Some(d) = demo.traj.dones.last_mut() {
        *d = true;
    }
    if let Some(v) = demo.traj.values.last_mut() {
        *v = 0.0;
    }
    Ok(GoalProposal {
        s0,
        sg,
        valid: is_valid_goal(task, s0, sg),
        demo,
        bob_succeeded: None,
    })
}

/// Bob attempts Alice's goal from her initial state.
pub fn run_bob_episode<P: Policy>(
    task: &TaskSpec,
    bob: &P,
    value: &ValueNet,
    proposal: &GoalProposal,
    rng: &mut SimRng,
) -> Result<Episode> {
    if !proposal.valid {
        return Err(Error::Contract("Bob only attempts valid goals".into()));
    }
    let start = task.reset_to(proposal.s0, Vec::new())?;
    run_episode(
        task,
        start,
        &proposal.goal(),
        bob,
        value,
        View::PositionsAndGoal,
        RewardMode::FirstSuccess,
        rng,
    )
}

/// What is kept of each proposal for the curriculum log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalRecord {
    pub iteration: usize,
    pub s0: Vec3,
    pub sg: Vec3,
    pub valid: bool,
    pub bob_succeeded: Option<bool>,
    pub alice_reward: f64,
    pub in_air: bool,
}

impl ProposalRecord {
    const WIDTH: usize = 10;

    pub fn displacement(&self) -> f64 {
        distance(self.sg, self.s0)
    }

    fn to_row(self) -> [f64; Self::WIDTH] {
        let bob = match self.bob_succeeded {
            None => -1.0,
            Some(b) => f64::from(u8::from(b)),
        };
        [
            self.iteration as f64,
            self.s0[0],
            self.s0[1],
            self.s0[2],
            self.sg[0],
            self.sg[1],
            self.sg[2],
            f64::from(u8::from(self.valid)),
            bob,
            self.alice_reward,
        ]
    }

    fn from_row(r: &[f64], rest: f64) -> Self {
        let sg = [r[4], r[5], r[6]];
        Self {
            iteration: r[0] as usize,
            s0: [r[1], r[2], r[3]],
            sg,
            valid: r[7] != 0.0,
            bob_succeeded: if r[8] < 0.0 { None } else { Some(r[8] != 0.0) },
            alice_reward: r[9],
            in_air: sg[2] > rest + 1e-9,
        }
    }
}

pub const PROPOSALS_CSV_HEADER: &str = "index,iteration,s0_x,s0_y,s0_z,sg_x,sg_y,sg_z,displacement,valid,in_air,bob_succeeded,alice_reward";

pub fn write_proposals_csv<W: Write>(mut out: W, records: &[ProposalRecord]) -> std::io::Result<()> {
    writeln!(out, "{PROPOSALS_CSV_HEADER}")?;
    for (i, r) in records.iter().enumerate() {
        let bob = match r.bob_succeeded {
            None => String::new(),
            Some(b) => u8::from(b).to_string(),
        };
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{},{},{},{bob},{}",
            r.iteration,
            r.s0[0],
            r.s0[1],
            r.s0[2],
            r.sg[0],
            r.sg[1],
            r.sg[2],
            r.displacement(),
            u8::from(r.valid),
            u8::from(r.in_air),
            r.alice_reward
        )?;
    }
    Ok(())
}

/// Aggregates over a window of consecutive proposals. Displacement, in-air
/// fraction and Bob success are over the valid proposals of the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumStats {
    pub window: usize,
    pub proposals: usize,
    pub mean_displacement: f64,
    pub in_air_fraction: f64,
    pub bob_success: f64,
    pub alice_validity: f64,
}

impl CurriculumStats {
    pub fn of(window: usize, records: &[ProposalRecord]) -> Self {
        let valid: Vec<&ProposalRecord> = records.iter().filter(|r| r.valid).collect();
        let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self {
            window,
            proposals: records.len(),
            mean_displacement: if valid.is_empty() {
                0.0
            } else {
                valid.iter().map(|r| r.displacement()).sum::<f64>() / valid.len() as f64
            },
            in_air_fraction: frac(valid.iter().filter(|r| r.in_air).count(), valid.len()),
            bob_success: frac(
                valid.iter().filter(|r| r.bob_succeeded == Some(true)).count(),
                valid.len(),
            ),
            alice_validity: frac(valid.len(), records.len()),
        }
    }

    pub fn windows(records: &[ProposalRecord], window: usize) -> Vec<Self> {
        records
            .chunks(window.max(1))
            .enumerate()
            .map(|(i, c)| Self::of(i, c))
            .collect()
    }
}

pub const CURRICULUM_CSV_HEADER: &str = "window,proposals,mean_displacement,in_air_fraction,bob_success,alice_validity";

pub fn write_curriculum_csv<W: Write>(mut out: W, stats: &[CurriculumStats]) -> std::io::Result<()> {
    writeln!(out, "{CURRICULUM_CSV_HEADER}")?;
    for s in stats {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.window, s.proposals, s.mean_displacement, s.in_air_fraction, s.bob_success, s.alice_validity
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    /// Bob's environment steps. Alice's steps are not counted.
    pub budget_steps: u64,
    /// Alice episodes per iteration; each valid one is followed by a Bob episode.
    pub episodes_per_iteration: usize,
    pub alice_ppo: PpoConfig,
    pub bob_ppo: PpoConfig,
    pub rewards: AspRewardConfig,
    pub demo_capacity: usize,
    pub k: usize,
    pub hidden: Vec<usize>,
    /// Fractions of the budget at which stage checkpoints are written.
    pub stages: Vec<f64>,
    /// Proposals per row of the curriculum log.
    pub stats_window: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            budget_steps: 2_000_000,
            episodes_per_iteration: 64,
            alice_ppo: Self::default_ppo(),
            bob_ppo: Self::default_ppo(),
            rewards: AspRewardConfig::default(),
            demo_capacity: 512,
            k: 4,
            hidden: vec![64, 64],
            stages: vec![0.1, 0.5, 1.0],
            stats_window: 200,
        }
    }
}

impl PretrainConfig {
    /// PPO settings for both players. Sampling noise already drives
    /// exploration, so there is no entropy bonus.
    pub fn default_ppo() -> PpoConfig {
        PpoConfig {
            entropy_coef: 0.0,
            ..PpoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.alice_ppo.validate()?;
        self.bob_ppo.validate()?;
        if self.episodes_per_iteration == 0 || self.k == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("episodes_per_iteration, k and hidden sizes must be positive".into()));
        }
        if self.rewards.r_difficult < 0.0 {
            return Err(Error::Config("r_difficult must be non-negative".into()));
        }
        if self.stages.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("stage fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn stage_name(fraction: f64) -> String {
        format!("stage-{:03}", (fraction * 100.0).round() as u32)
    }
}

/// Everything needed to continue pretraining exactly where it stopped.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub alice: GaussianPolicy,
    pub alice_learner: PpoLearner,
    pub bob: CompositePolicy,
    pub bob_learner: PpoLearner,
    pub demos: DemoQueue,
    pub records: Vec<ProposalRecord>,
    pub alice_metrics: Vec<MetricsRow>,
    pub bob_metrics: Vec<MetricsRow>,
    /// Environment steps, Alice's and Bob's together.
    pub steps: u64,
    pub bob_steps: u64,
    pub iteration: usize,
    pub rng: SimRng,
}

pub const PRETRAIN_KIND: &str = "pretrain";

impl PretrainState {
    pub fn fresh(cfg: &PretrainConfig, mut rng: SimRng) -> Result<Self> {
        cfg.validate()?;
        let alice = GaussianPolicy::monolithic(View::Privileged, &cfg.hidden, &mut rng)?;
        let alice_value = ValueNet::init(View::Privileged, &cfg.hidden, &mut rng)?;
        let bob = CompositePolicy::init(cfg.k, &cfg.hidden, &mut rng)?;
        let bob_value = ValueNet::init(View::PositionsAndGoal, &cfg.hidden, &mut rng)?;
        Ok(Self {
            alice_learner: PpoLearner::new(&alice, alice_value, cfg.alice_ppo.clone())?,
            bob_learner: PpoLearner::new(&bob, bob_value, cfg.bob_ppo.clone())?,
            alice,
            bob,
            demos: DemoQueue::new(cfg.demo_capacity),
            records: Vec::new(),
            alice_metrics: Vec::new(),
            bob_metrics: Vec::new(),
            steps: 0,
            bob_steps: 0,
            iteration: 0,
            rng,
        })
    }

    pub fn to_checkpoint(&self, cfg: &PretrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(PRETRAIN_KIND)
            .with_meta("steps", self.steps)
            .with_meta("bob_steps", self.bob_steps)
            .with_meta("iteration", self.iteration)
            .with_meta("budget_steps", cfg.budget_steps)
            .with_meta("bob.fingerprint", self.bob.current_primitives().fingerprint());
        self.alice.store(&mut ck, "alice");
        self.alice_learner.value.store(&mut ck, "alice.value");
        self.bob.store(&mut ck, "bob");
        self.bob_learner.value.store(&mut ck, "bob.value");
        ck.add_optimizer("alice", &self.alice_learner.policy_opt);
        ck.add_optimizer("alice.value", &self.alice_learner.value_opt);
        ck.add_optimizer("bob", &self.bob_learner.policy_opt);
        ck.add_optimizer("bob.value", &self.bob_learner.value_opt);
        ck.add_params("log.proposals", &records_to_params(&self.records));
        ck.add_params("log.alice_metrics", &metrics_to_params(&self.alice_metrics));
        ck.add_params("log.bob_metrics", &metrics_to_params(&self.bob_metrics));
        if let Some(d) = demos_to_params(&self.demos) {
            ck.add_params("demos", &d);
        }
        ck.rng = Some(RngState::capture(&self.rng));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &PretrainConfig) -> Result<Self> {
        if ck.kind != PRETRAIN_KIND {
            return Err(Error::LayoutMismatch(format!(
                "expected a {PRETRAIN_KIND} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let parse = |k: &str| -> Result<u64> {
            ck.meta(k)?
                .parse()
                .map_err(|_| Error::LayoutMismatch(format!("bad metadata `{k}`")))
        };
        let alice = GaussianPolicy::load(ck, "alice")?;
        let bob = CompositePolicy::load(ck, "bob")?;
        let opt = |name: &str| {
            ck.optimizer(name)
                .cloned()
                .ok_or_else(|| Error::LayoutMismatch(format!("checkpoint lacks optimizer `{name}`")))
        };
        let mut alice_learner = PpoLearner::new(&alice, ValueNet::load(ck, "alice.value")?, cfg.alice_ppo.clone())?;
        alice_learner.policy_opt = opt("alice")?;
        alice_learner.value_opt = opt("alice.value")?;
        let mut bob_learner = PpoLearner::new(&bob, ValueNet::load(ck, "bob.value")?, cfg.bob_ppo.clone())?;
        bob_learner.policy_opt = opt("bob")?;
        bob_learner.value_opt = opt("bob.value")?;
        let rest = TaskSpec::new(Variant::Pretrain).workspace.rest_height();
        let mut demos = DemoQueue::new(cfg.demo_capacity);
        if let Some(d) = ck.params("demos") {
            for demo in demos_from_params(d)? {
                demos.push(demo);
            }
        }
        Ok(Self {
            alice,
            alice_learner,
            bob,
            bob_learner,
            demos,
            records: records_from_params(ck.require_params("log.proposals")?, rest)?,
            alice_metrics: metrics_from_params(ck.require_params("log.alice_metrics")?)?,
            bob_metrics: metrics_from_params(ck.require_params("log.bob_metrics")?)?,
            steps: parse("steps")?,
            bob_steps: parse("bob_steps")?,
            iteration: parse("iteration")? as usize,
            rng: ck
                .rng
                .as_ref()
                .ok_or_else(|| Error::LayoutMismatch("pretrain checkpoint lacks RNG state".into()))?
                .restore(),
        })
    }

    /// One round: a batch of Alice episodes, Bob on every valid goal, then a
    /// PPO update for each (Bob's with cloning of failed goals).
    pub fn iterate(&mut self, task: &TaskSpec, cfg: &PretrainConfig) -> Result<()> {
        let rest = task.workspace.rest_height();
        let mut alice_trajs = Vec::with_capacity(cfg.episodes_per_iteration);
        let mut bob_trajs = Vec::new();
        let mut bob_eps = Vec::new();
        let mut alice_rewards = Vec::new();
        let mut alice_steps = 0u64;
        let mut bob_steps = 0u64;
        for _ in 0..cfg.episodes_per_iteration {
            let mut p = run_alice_episode(task, &self.alice, &self.alice_learner.value, &mut self.rng)?;
            alice_steps += p.demo.traj.len() as u64;
            if p.valid {
                let bob_ep = run_bob_episode(task, &self.bob, &self.bob_learner.value, &p, &mut self.rng)?;
                bob_steps += bob_ep.traj.len() as u64;
                let ok = bob_ep.stats.success;
                p.bob_succeeded = Some(ok);
                if !ok {
                    self.demos.push(p.demo_for_bob());
                }
                bob_eps.push(bob_ep.stats);
                bob_trajs.push(bob_ep.traj);
            }
            let r = alice_reward(&p, &cfg.rewards)?;
            alice_rewards.push(r);
            *p.demo.traj.rewards.last_mut().expect("non-empty episode") = r;
            self.records.push(ProposalRecord {
                iteration: self.iteration,
                s0: p.s0,
                sg: p.sg,
                valid: p.valid,
                bob_succeeded: p.bob_succeeded,
                alice_reward: r,
                in_air: p.sg[2] > rest + 1e-9,
            });
            alice_trajs.push(p.demo.traj);
        }
        self.steps += alice_steps + bob_steps;
        self.bob_steps += bob_steps;

        let a_cfg = &self.alice_learner.config;
        let a_batch = SampleBatch::from_trajectories(&alice_trajs, a_cfg.gamma, a_cfg.lambda_gae)?;
        let a_diag = self.alice_learner.update(&mut self.alice, &a_batch, None, &mut self.rng)?;
        let b_diag = if bob_trajs.is_empty() {
            // no valid goal this round: Bob still learns from the queue
            let mut d = PpoDiagnostics::default();
            if let Some(demo) = self.demos.sample(cfg.bob_ppo.minibatch_size, &mut self.rng) {
                d.bc_loss = crate::ppo::bc_update(
                    &mut self.bob,
                    &mut self.bob_learner.policy_opt,
                    &demo,
                    cfg.bob_ppo.bc_coef,
                    cfg.bob_ppo.max_grad_norm,
                )?;
            }
            d
        } else {
            let b_cfg = &self.bob_learner.config;
            let b_batch = SampleBatch::from_trajectories(&bob_trajs, b_cfg.gamma, b_cfg.lambda_gae)?;
            self.bob_learner
                .update(&mut self.bob, &b_batch, Some(&self.demos), &mut self.rng)?
        };

        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let valid = alice_rewards.len() as f64;
        self.alice_metrics.push(MetricsRow {
            update: self.iteration,
            env_steps: self.steps - self.bob_steps,
            episodes: alice_rewards.len(),
            mean_episode_reward: mean(&alice_rewards),
            success_rate: bob_trajs.len() as f64 / valid,
            diag: a_diag,
        });
        let bob_rewards: Vec<f64> = bob_eps.iter().map(|e| e.reward_sum).collect();
        let bob_success: Vec<f64> = bob_eps.iter().map(|e| f64::from(u8::from(e.success))).collect();
        self.bob_metrics.push(MetricsRow {
            update: self.iteration,
            env_steps: self.bob_steps,
            episodes: bob_eps.len(),
            mean_episode_reward: mean(&bob_rewards),
            success_rate: mean(&bob_success),
            diag: b_diag,
        });
        self.iteration += 1;
        Ok(())
    }
}

/// Files written by [`pretrain`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutputs {
    pub initial: PathBuf,
    pub stages: Vec<(f64, PathBuf)>,
    pub primitives: Option<PathBuf>,
}

pub const PRIMITIVES_FILE: &str = "primitives.ckpt";

/// Iterations in a row without a Bob episode after which pretraining gives up.
pub const MAX_IDLE_ITERATIONS: usize = 1000;

/// Runs (or resumes) pretraining, writing checkpoints and logs to `out`.
///
/// An initial checkpoint is always written. Stage checkpoints are written
/// when Bob's step count first reaches each stage fraction of the budget, and
/// the frozen primitives once the budget is used up. If an update fails, the
/// state from before that iteration is saved as `aborted.ckpt`.
pub fn pretrain(cfg: &PretrainConfig, mut state: PretrainState, out: &Path) -> Result<(PretrainState, PretrainOutputs)> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let task = TaskSpec::new(Variant::Pretrain);
    let initial = out.join("initial.ckpt");
    if state.steps == 0 {
        state.to_checkpoint(cfg).save(&initial)?;
    }
    let mut outputs = PretrainOutputs {
        initial,
        stages: Vec::new(),
        primitives: None,
    };
    let stage_steps = |f: f64| (f * cfg.budget_steps as f64).ceil() as u64;
    for &f in &cfg.stages {
        let p = out.join(format!("{}.ckpt", PretrainConfig::stage_name(f)));
        if cfg.budget_steps > 0 && state.bob_steps >= stage_steps(f) && p.exists() {
            outputs.stages.push((f, p));
        }
    }
    write_logs(&state, cfg, out)?;
    let mut idle = 0;
    while state.bob_steps < cfg.budget_steps {
        let snapshot = state.clone();
        let result = state.iterate(&task, cfg).and_then(|()| {
            idle = if state.bob_steps == snapshot.bob_steps { idle + 1 } else { 0 };
            if idle >= MAX_IDLE_ITERATIONS {
                return Err(Error::Contract(format!(
                    "no valid goal proposed in {MAX_IDLE_ITERATIONS} consecutive iterations"
                )));
            }
            Ok(())
        });
        if let Err(e) = result {
            snapshot.to_checkpoint(cfg).save(&out.join("aborted.ckpt"))?;
            write_logs(&snapshot, cfg, out)?;
            return Err(e);
        }
        for &f in &cfg.stages {
            let target = stage_steps(f);
            if snapshot.bob_steps < target && state.bob_steps >= target {
                let p = out.join(format!("{}.ckpt", PretrainConfig::stage_name(f)));
                state.to_checkpoint(cfg).save(&p)?;
                outputs.stages.push((f, p));
            }
        }
        write_logs(&state, cfg, out)?;
    }
    if cfg.budget_steps > 0 {
        let p = out.join(PRIMITIVES_FILE);
        state.bob.current_primitives().to_checkpoint().save(&p)?;
        outputs.primitives = Some(p);
    }
    Ok((state, outputs))
}

fn write_logs(state: &PretrainState, cfg: &PretrainConfig, out: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_proposals_csv(&mut buf, &state.records)?;
    fs::write(out.join("proposals.csv"), &buf)?;
    buf.clear();
    write_curriculum_csv(&mut buf, &CurriculumStats::windows(&state.records, cfg.stats_window))?;
    fs::write(out.join("curriculum.csv"), &buf)?;
    buf.clear();
    write_metrics_csv(&mut buf, &state.alice_metrics)?;
    fs::write(out.join("alice_metrics.csv"), &buf)?;
    buf.clear();
    write_metrics_csv(&mut buf, &state.bob_metrics)?;
    fs::write(out.join("bob_metrics.csv"), &buf)?;
    Ok(())
}

/// Loads the primitives from a pretraining or frozen-primitives checkpoint.
pub fn load_primitives(path: &Path) -> Result<Primitives> {
    Primitives::from_checkpoint(&Checkpoint::load(path)?)
}

fn records_to_params(records: &[ProposalRecord]) -> ParamVector {
    let values: Vec<f64> = records.iter().flat_map(|r| r.to_row()).collect();
    ParamVector::from_values(
        vec![LayerShape::new("records", vec![records.len(), ProposalRecord::WIDTH])],
        values,
    )
    .expect("finite proposal log")
}

fn records_from_params(p: &ParamVector, rest: f64) -> Result<Vec<ProposalRecord>> {
    if !p.len().is_multiple_of(ProposalRecord::WIDTH) {
        return Err(Error::LayoutMismatch("proposal log width".into()));
    }
    Ok(p.values()
        .chunks_exact(ProposalRecord::WIDTH)
        .map(|r| ProposalRecord::from_row(r, rest))
        .collect())
}

const METRICS_WIDTH: usize = 11;

fn metrics_to_params(rows: &[MetricsRow]) -> ParamVector {
    let values: Vec<f64> = rows
        .iter()
        .flat_map(|r| {
            let d = r.diag;
            [
                r.update as f64,
                r.env_steps as f64,
                r.episodes as f64,
                r.mean_episode_reward,
                r.success_rate,
                d.policy_loss,
                d.value_loss,
                d.entropy,
                d.approx_kl,
                d.clip_fraction,
                d.bc_loss,
            ]
        })
        .collect();
    ParamVector::from_values(vec![LayerShape::new("rows", vec![rows.len(), METRICS_WIDTH])], values)
        .expect("finite metrics")
}

fn metrics_from_params(p: &ParamVector) -> Result<Vec<MetricsRow>> {
    if !p.len().is_multiple_of(METRICS_WIDTH) {
        return Err(Error::LayoutMismatch("metrics log width".into()));
    }
    Ok(p.values()
        .chunks_exact(METRICS_WIDTH)
        .map(|r| MetricsRow {
            update: r[0] as usize,
            env_steps: r[1] as u64,
            episodes: r[2] as usize,
            mean_episode_reward: r[3],
            success_rate: r[4],
            diag: PpoDiagnostics {
                policy_loss: r[5],
                value_loss: r[6],
                entropy: r[7],
                approx_kl: r[8],
                clip_fraction: r[9],
                bc_loss: r[10],
            },
        })
        .collect())
}

fn demos_to_params(q: &DemoQueue) -> Option<ParamVector> {
    let mut out = ParamVector::zeros(Vec::new());
    for (i, d) in q.iter().enumerate() {
        let n = d.len();
        let obs = ParamVector::from_values(vec![LayerShape::new("obs", vec![n, d.obs_dim])], d.obs.clone()).ok()?;
        let raw = ParamVector::from_values(vec![LayerShape::new("raw", vec![n, d.raw_dim])], d.raw.clone()).ok()?;
        out.append(&format!("d{i}."), &obs);
        out.append(&format!("d{i}."), &raw);
    }
    (!out.is_empty()).then_some(out)
}

fn demos_from_params(p: &ParamVector) -> Result<Vec<Demo>> {
    let mut demos = Vec::new();
    for i in 0.. {
        let Some(d) = p.extract(&format!("d{i}.")) else {
            break;
        };
        let (o, r) = match d.layout() {
            [o, r] if o.name == "obs" && r.name == "raw" && o.shape.len() == 2 && r.shape.len() == 2 => (o, r),
            _ => return Err(Error::LayoutMismatch(format!("demonstration {i}"))),
        };
        let split = o.numel();
        demos.push(Demo {
            obs_dim: o.shape[1],
            raw_dim: r.shape[1],
            obs: d.values()[..split].to_vec(),
            raw: d.values()[split..].to_vec(),
        });
    }
    Ok(demos)
}
