//! Clipped-surrogate PPO with generalized advantage estimation and an
//! auxiliary behavioral-cloning loss.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::env::{observe, Action, EnvState, Goal, RewardMode, TaskSpec, View};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Activation, AdamState, MlpSpec, ParamVector};
use crate::policy::{input_scale, scale_rows, Policy, PolicyCache};
use crate::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub bc_coef: f64,
    pub lr: f64,
    pub rollout_steps: usize,
    /// Global gradient-norm clip applied to each minibatch step.
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.98,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            epochs_per_update: 4,
            minibatch_size: 256,
            value_coef: 0.5,
            entropy_coef: 0.01,
            bc_coef: 0.5,
            lr: 3e-4,
            rollout_steps: 4096,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return bad("lambda_gae must lie in [0, 1]");
        }
        if self.clip_eps <= 0.0 {
            return bad("clip_eps must be positive");
        }
        if self.lr <= 0.0 || self.minibatch_size == 0 || self.epochs_per_update == 0 || self.rollout_steps == 0 {
            return bad("lr, minibatch_size, epochs_per_update and rollout_steps must be positive");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 || self.bc_coef < 0.0 || self.max_grad_norm <= 0.0 {
            return bad("loss coefficients must be non-negative and max_grad_norm positive");
        }
        Ok(())
    }
}

/// One contiguous stretch of a single episode.
///
/// `values` has one more entry than the other per-step arrays: the bootstrap
/// value of the state after the last step. `dones[t]` marks true termination
/// (no bootstrapping past `t`); a stretch cut by the horizon or by the
/// rollout budget is not done and relies on the bootstrap value instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub obs_dim: usize,
    pub raw_dim: usize,
    pub obs: Vec<f64>,
    pub raw: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub steps: Vec<u32>,
}

impl Trajectory {
    pub fn new(obs_dim: usize, raw_dim: usize) -> Self {
        Self {
            obs_dim,
            raw_dim,
            obs: Vec::new(),
            raw: Vec::new(),
            log_probs: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            dones: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(&mut self, obs: &[f64], raw: &[f64], log_prob: f64, reward: f64, value: f64, done: bool, step: u32) {
        self.obs.extend_from_slice(obs);
        self.raw.extend_from_slice(raw);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
        self.steps.push(step);
    }

    /// Appends the bootstrap value; 0 is forced when the last step terminated.
    pub fn finish(&mut self, bootstrap: f64) {
        let v = if self.dones.last() == Some(&true) { 0.0 } else { bootstrap };
        self.values.push(v);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let ok = self.obs.len() == n * self.obs_dim
            && self.raw.len() == n * self.raw_dim
            && self.log_probs.len() == n
            && self.dones.len() == n
            && self.steps.len() == n
            && self.values.len() == n + 1;
        if !ok {
            return Err(Error::DimensionMismatch {
                layer: "trajectory".into(),
                expected: n + 1,
                got: self.values.len(),
            });
        }
        if self.log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory log-probabilities".into()));
        }
        Ok(())
    }
}

/// Advantages and returns by GAE(gamma, lambda); not normalized.
pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    traj.validate()?;
    let n = traj.len();
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let cont = if traj.dones[t] { 0.0 } else { 1.0 };
        let delta = traj.rewards[t] + gamma * cont * traj.values[t + 1] - traj.values[t];
        last = delta + gamma * lambda * cont * last;
        adv[t] = last;
    }
    let ret = adv.iter().zip(&traj.values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shifts and scales to mean 0, standard deviation 1 (population form).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

/// Flattened, advantage-normalized samples for one PPO update.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub obs_dim: usize,
    pub raw_dim: usize,
    pub obs: Vec<f64>,
    pub raw: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl SampleBatch {
    pub fn from_trajectories(trajs: &[Trajectory], gamma: f64, lambda: f64) -> Result<Self> {
        let first = trajs
            .iter()
            .find(|t| !t.is_empty())
            .ok_or_else(|| Error::Contract("empty PPO batch".into()))?;
        let mut b = Self {
            obs_dim: first.obs_dim,
            raw_dim: first.raw_dim,
            obs: Vec::new(),
            raw: Vec::new(),
            old_log_probs: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        for t in trajs.iter().filter(|t| !t.is_empty()) {
            if t.obs_dim != b.obs_dim || t.raw_dim != b.raw_dim {
                return Err(Error::DimensionMismatch {
                    layer: "trajectory batch".into(),
                    expected: b.obs_dim,
                    got: t.obs_dim,
                });
            }
            let (adv, ret) = compute_gae(t, gamma, lambda)?;
            b.obs.extend_from_slice(&t.obs);
            b.raw.extend_from_slice(&t.raw);
            b.old_log_probs.extend_from_slice(&t.log_probs);
            b.advantages.extend(adv);
            b.returns.extend(ret);
        }
        normalize_advantages(&mut b.advantages);
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> Self {
        let mut b = Self {
            obs_dim: self.obs_dim,
            raw_dim: self.raw_dim,
            obs: Vec::with_capacity(idx.len() * self.obs_dim),
            raw: Vec::with_capacity(idx.len() * self.raw_dim),
            old_log_probs: Vec::with_capacity(idx.len()),
            advantages: Vec::with_capacity(idx.len()),
            returns: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            b.obs.extend_from_slice(&self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]);
            b.raw.extend_from_slice(&self.raw[i * self.raw_dim..(i + 1) * self.raw_dim]);
            b.old_log_probs.push(self.old_log_probs[i]);
            b.advantages.push(self.advantages[i]);
            b.returns.push(self.returns[i]);
        }
        b
    }
}

/// Per-sample clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` and its
/// derivative with respect to the log-probability.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if clipped < unclipped {
        (clipped, 0.0)
    } else {
        (unclipped, unclipped)
    }
}

/// State-value function.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub view: View,
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl ValueNet {
    pub fn init(view: View, hidden: &[usize], rng: &mut SimRng) -> Result<Self> {
        let spec = MlpSpec::new(view.dim(), hidden, 1, Activation::Tanh)?;
        let params = spec.init(rng, 1.0);
        Ok(Self { view, spec, params })
    }

    pub fn from_params(view: View, spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.check_layout(&params)?;
        if spec.output_dim != 1 || spec.input_dim != view.dim() {
            return Err(Error::LayoutMismatch(format!("value net {spec} for view {view:?}")));
        }
        Ok(Self { view, spec, params })
    }

    pub fn store(&self, ck: &mut Checkpoint, name: &str) {
        ck.meta.insert(format!("{name}.view"), self.view.name().to_string());
        ck.meta.insert(format!("{name}.spec"), self.spec.to_string());
        ck.add_params(name, &self.params);
    }

    pub fn load(ck: &Checkpoint, name: &str) -> Result<Self> {
        let view = View::parse(ck.meta(&format!("{name}.view"))?)?;
        let spec: MlpSpec = ck.meta(&format!("{name}.spec"))?.parse()?;
        Self::from_params(view, spec, ck.require_params(name)?.clone())
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.values(obs, 1)?[0])
    }

    pub fn values(&self, obs: &[f64], n: usize) -> Result<Vec<f64>> {
        let x = scale_rows(obs, &input_scale(self.view), self.spec.input_dim, n)?;
        let v = self.spec.forward_slice(self.params.values(), &x, n)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("value estimate".into()));
        }
        Ok(v)
    }

    /// `coef * mean((V - target)^2)` and its gradient.
    pub fn loss_and_grad(&self, obs: &[f64], targets: &[f64], coef: f64) -> Result<(f64, Vec<f64>)> {
        let n = targets.len();
        let x = scale_rows(obs, &input_scale(self.view), self.spec.input_dim, n)?;
        let cache = self.spec.forward_cached(self.params.values(), &x, n)?;
        let mut loss = 0.0;
        let mut out_grad = vec![0.0; n];
        for (b, (v, t)) in cache.output().iter().zip(targets).enumerate() {
            let e = v - t;
            loss += e * e;
            out_grad[b] = 2.0 * coef * e / n as f64;
        }
        let mut grad = vec![0.0; self.params.len()];
        self.spec
            .backward_slice(self.params.values(), &cache, &out_grad, &mut grad)?;
        Ok((coef * loss / n as f64, grad))
    }
}

/// Observation/action pairs to clone.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub obs_dim: usize,
    pub raw_dim: usize,
    pub obs: Vec<f64>,
    pub raw: Vec<f64>,
}

impl Demo {
    pub fn len(&self) -> usize {
        self.raw.len() / self.raw_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Bounded FIFO of demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoQueue {
    pub capacity: usize,
    demos: VecDeque<Demo>,
}

impl DemoQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            demos: VecDeque::new(),
        }
    }

    pub fn push(&mut self, demo: Demo) {
        if self.capacity == 0 || demo.is_empty() {
            return;
        }
        while self.demos.len() >= self.capacity {
            self.demos.pop_front();
        }
        self.demos.push_back(demo);
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Demo> {
        self.demos.iter()
    }

    /// Uniformly samples `size` (obs, action) pairs across all stored steps.
    pub fn sample(&self, size: usize, rng: &mut SimRng) -> Option<Demo> {
        let first = self.demos.front()?;
        let total: usize = self.demos.iter().map(Demo::len).sum();
        let mut out = Demo {
            obs_dim: first.obs_dim,
            raw_dim: first.raw_dim,
            obs: Vec::with_capacity(size * first.obs_dim),
            raw: Vec::with_capacity(size * first.raw_dim),
        };
        for _ in 0..size {
            let mut i = rng.random_range(0..total);
            for d in &self.demos {
                if i < d.len() {
                    out.obs.extend_from_slice(&d.obs[i * d.obs_dim..(i + 1) * d.obs_dim]);
                    out.raw.extend_from_slice(&d.raw[i * d.raw_dim..(i + 1) * d.raw_dim]);
                    break;
                }
                i -= d.len();
            }
        }
        Some(out)
    }
}

/// Behavioral-cloning loss `-bc_coef * mean log pi(a | s)` and its gradient.
pub fn bc_loss_and_grad<P: Policy>(policy: &P, demo: &Demo, bc_coef: f64) -> Result<(f64, Vec<f64>)> {
    let n = demo.len();
    if n == 0 {
        return Err(Error::Contract("empty demonstration".into()));
    }
    let cache = policy.evaluate_batch(&demo.obs, &demo.raw, n)?;
    let loss = -bc_coef * cache.log_probs().iter().sum::<f64>() / n as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let dlogp = vec![-bc_coef / n as f64; n];
    policy.backward_batch(&cache, &dlogp, &vec![0.0; n], &mut grad)?;
    Ok((loss, grad))
}

/// One gradient step on the behavioral-cloning loss. Returns the loss.
pub fn bc_update<P: Policy>(
    policy: &mut P,
    opt: &mut AdamState,
    demo: &Demo,
    bc_coef: f64,
    max_grad_norm: f64,
) -> Result<f64> {
    if demo.is_empty() {
        return Err(Error::Contract("empty demonstration".into()));
    }
    if bc_coef == 0.0 {
        return Ok(0.0);
    }
    let (loss, mut grad) = bc_loss_and_grad(policy, demo, bc_coef)?;
    if !loss.is_finite() {
        return Err(Error::TrainingAborted(format!("non-finite behavioral-cloning loss {loss}")));
    }
    clip_grad_norm(&mut grad, max_grad_norm);
    let frozen = policy.frozen_ranges();
    opt.step_slices(policy.params_mut().values_mut(), &grad, &frozen)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub bc_loss: f64,
}

impl PpoDiagnostics {
    pub fn is_finite(&self) -> bool {
        [
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.approx_kl,
            self.clip_fraction,
            self.bc_loss,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Optimizer state and critic of one PPO agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoLearner {
    pub config: PpoConfig,
    pub policy_opt: AdamState,
    pub value: ValueNet,
    pub value_opt: AdamState,
}

impl PpoLearner {
    pub fn new<P: Policy>(policy: &P, value: ValueNet, config: PpoConfig) -> Result<Self> {
        config.validate()?;
        let policy_opt = AdamState::new(policy.params().layout().to_vec(), config.lr)?;
        let value_opt = AdamState::new(value.params.layout().to_vec(), config.lr)?;
        Ok(Self {
            config,
            policy_opt,
            value,
            value_opt,
        })
    }

    /// Epochs of shuffled minibatch steps over `batch`. When `demos` holds
    /// anything, each PPO minibatch step is followed by one cloning step.
    pub fn update<P: Policy>(
        &mut self,
        policy: &mut P,
        batch: &SampleBatch,
        demos: Option<&DemoQueue>,
        rng: &mut SimRng,
    ) -> Result<PpoDiagnostics> {
        if batch.is_empty() {
            return Err(Error::Contract("empty PPO batch".into()));
        }
        let cfg = self.config.clone();
        let frozen = policy.frozen_ranges();
        let mut idx: Vec<usize> = (0..batch.len()).collect();
        let mut sum = PpoDiagnostics::default();
        let (mut n_mb, mut n_bc) = (0usize, 0usize);
        for _ in 0..cfg.epochs_per_update {
            idx.shuffle(rng);
            for chunk in idx.chunks(cfg.minibatch_size) {
                let mb = batch.gather(chunk);
                let m = mb.len();
                let cache = policy.evaluate_batch(&mb.obs, &mb.raw, m)?;
                let mut dlogp = vec![0.0; m];
                let (mut pl, mut kl, mut clipped) = (0.0, 0.0, 0usize);
                for b in 0..m {
                    let log_ratio = cache.log_probs()[b] - mb.old_log_probs[b];
                    let ratio = log_ratio.exp();
                    let (obj, d) = clipped_surrogate(ratio, mb.advantages[b], cfg.clip_eps);
                    pl -= obj;
                    dlogp[b] = -d / m as f64;
                    kl += (ratio - 1.0) - log_ratio;
                    if (ratio - 1.0).abs() > cfg.clip_eps {
                        clipped += 1;
                    }
                }
                let entropy = cache.entropies().iter().sum::<f64>() / m as f64;
                let dent = vec![-cfg.entropy_coef / m as f64; m];
                let mut grad = vec![0.0; policy.params().len()];
                policy.backward_batch(&cache, &dlogp, &dent, &mut grad)?;

                let (vl, mut vgrad) = self.value.loss_and_grad(&mb.obs, &mb.returns, cfg.value_coef)?;
                let diag = PpoDiagnostics {
                    policy_loss: pl / m as f64,
                    value_loss: vl,
                    entropy,
                    approx_kl: kl / m as f64,
                    clip_fraction: clipped as f64 / m as f64,
                    bc_loss: 0.0,
                };
                if !diag.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::TrainingAborted(format!("non-finite PPO loss: {diag:?}")));
                }
                clip_grad_norm(&mut grad, cfg.max_grad_norm);
                clip_grad_norm(&mut vgrad, cfg.max_grad_norm);
                self.policy_opt
                    .step_slices(policy.params_mut().values_mut(), &grad, &frozen)?;
                self.value_opt
                    .step_slices(self.value.params.values_mut(), &vgrad, &[])?;
                sum.policy_loss += diag.policy_loss;
                sum.value_loss += diag.value_loss;
                sum.entropy += diag.entropy;
                sum.approx_kl += diag.approx_kl;
                sum.clip_fraction += diag.clip_fraction;
                n_mb += 1;

                if let Some(q) = demos.filter(|q| !q.is_empty() && cfg.bc_coef > 0.0) {
                    let demo = q.sample(cfg.minibatch_size, rng).expect("non-empty queue");
                    sum.bc_loss += bc_update(policy, &mut self.policy_opt, &demo, cfg.bc_coef, cfg.max_grad_norm)?;
                    n_bc += 1;
                }
            }
        }
        let k = n_mb as f64;
        Ok(PpoDiagnostics {
            policy_loss: sum.policy_loss / k,
            value_loss: sum.value_loss / k,
            entropy: sum.entropy / k,
            approx_kl: sum.approx_kl / k,
            clip_fraction: sum.clip_fraction / k,
            bc_loss: if n_bc > 0 { sum.bc_loss / n_bc as f64 } else { 0.0 },
        })
    }
}

/// Outcome of one finished episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub reward_sum: f64,
    /// Success of the final state.
    pub success: bool,
    pub steps: u32,
}

/// A stochastic episode with everything the caller may need afterwards.
#[derive(Debug, Clone)]
pub struct Episode {
    pub traj: Trajectory,
    /// Visited states, including the initial one.
    pub states: Vec<EnvState>,
    /// Environment actions (after decoding and clamping).
    pub actions: Vec<Action>,
    pub stats: EpisodeStats,
}

/// Runs one full episode from `state` with sampled actions.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<P: Policy>(
    task: &TaskSpec,
    state: EnvState,
    goal: &Goal,
    policy: &P,
    value: &ValueNet,
    view: View,
    mode: RewardMode,
    rng: &mut SimRng,
) -> Result<Episode> {
    let mut traj = Trajectory::new(view.dim(), policy.raw_dim());
    let mut states = vec![state];
    let mut actions = Vec::new();
    let mut reward_sum = 0.0;
    loop {
        let s = states.last().expect("initial state");
        let obs = observe(s, goal, view);
        let v = value.value(&obs)?;
        let sample = policy.sample(&obs, rng)?;
        let tr = task.step(s, &sample.action, goal, mode)?;
        let terminated = tr.done && tr.state.step_idx < task.horizon;
        traj.push(&obs, &sample.raw, sample.log_prob, tr.reward, v, terminated, s.step_idx);
        reward_sum += tr.reward;
        actions.push(sample.action);
        let done = tr.done;
        let success = tr.success;
        states.push(tr.state);
        if done {
            let last = states.last().expect("state");
            let boot = if terminated { 0.0 } else { value.value(&observe(last, goal, view))? };
            traj.finish(boot);
            return Ok(Episode {
                traj,
                stats: EpisodeStats {
                    reward_sum,
                    success,
                    steps: last.step_idx,
                },
                states,
                actions,
            });
        }
    }
}

/// A persistent environment instance that episodes are streamed from.
#[derive(Debug, Clone)]
pub struct EnvRunner {
    pub task: TaskSpec,
    pub view: View,
    pub mode: RewardMode,
    current: Option<(EnvState, Goal)>,
    partial: Option<Trajectory>,
    reward_sum: f64,
}

impl EnvRunner {
    pub fn new(task: TaskSpec, view: View, mode: RewardMode) -> Result<Self> {
        task.validate()?;
        Ok(Self {
            task,
            view,
            mode,
            current: None,
            partial: None,
            reward_sum: 0.0,
        })
    }

    pub fn pool(task: &TaskSpec, view: View, mode: RewardMode, n: usize) -> Result<Vec<Self>> {
        (0..n).map(|_| Self::new(task.clone(), view, mode)).collect()
    }
}

/// Steps gathered by [`collect_rollouts`].
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub trajectories: Vec<Trajectory>,
    pub episodes: Vec<EpisodeStats>,
    pub steps: usize,
}

impl Rollout {
    pub fn mean_reward(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.reward_sum))
    }

    pub fn success_rate(&self) -> f64 {
        mean(self.episodes.iter().map(|e| f64::from(u8::from(e.success))))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Takes exactly `n_steps` environment steps, round-robin over the pool.
/// Unfinished episodes are cut with a bootstrap value and resumed on the
/// next call.
pub fn collect_rollouts<P: Policy>(
    runners: &mut [EnvRunner],
    policy: &P,
    value: &ValueNet,
    n_steps: usize,
    rng: &mut SimRng,
) -> Result<Rollout> {
    if runners.is_empty() {
        return Err(Error::Config("empty environment pool".into()));
    }
    let mut out = Rollout::default();
    for t in 0..n_steps {
        let id = t % runners.len();
        let r = &mut runners[id];
        if r.current.is_none() {
            r.current = Some(r.task.reset(rng)?);
            r.reward_sum = 0.0;
        }
        let (state, goal) = r.current.as_ref().expect("reset");
        let obs = observe(state, goal, r.view);
        let v = value.value(&obs)?;
        let sample = policy.sample(&obs, rng)?;
        let tr = r
            .task
            .step(state, &sample.action, goal, r.mode)
            .map_err(|e| Error::Env {
                step: state.step_idx,
                reason: format!("env {id}, {} episode: {e}", r.task.variant),
            })?;
        let terminated = tr.done && tr.state.step_idx < r.task.horizon;
        let partial = r
            .partial
            .get_or_insert_with(|| Trajectory::new(r.view.dim(), policy.raw_dim()));
        partial.push(&obs, &sample.raw, sample.log_prob, tr.reward, v, terminated, state.step_idx);
        r.reward_sum += tr.reward;
        out.steps += 1;
        if tr.done {
            let goal = *goal;
            let boot = if terminated { 0.0 } else { value.value(&observe(&tr.state, &goal, r.view))? };
            let mut traj = r.partial.take().expect("partial");
            traj.finish(boot);
            out.trajectories.push(traj);
            out.episodes.push(EpisodeStats {
                reward_sum: r.reward_sum,
                success: tr.success,
                steps: tr.state.step_idx,
            });
            r.current = None;
        } else {
            r.current = Some((tr.state, *goal));
        }
    }
    for r in runners.iter_mut() {
        if let (Some(mut traj), Some((state, goal))) = (r.partial.take(), r.current.as_ref()) {
            traj.finish(value.value(&observe(state, goal, r.view))?);
            out.trajectories.push(traj);
        }
    }
    Ok(out)
}

pub const METRICS_CSV_HEADER: &str =
    "update,env_steps,episodes,mean_episode_reward,success_rate,policy_loss,value_loss,entropy,approx_kl,clip_fraction,bc_loss";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub update: usize,
    pub env_steps: u64,
    pub episodes: usize,
    pub mean_episode_reward: f64,
    pub success_rate: f64,
    pub diag: PpoDiagnostics,
}

impl MetricsRow {
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = &self.diag;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.env_steps,
            self.episodes,
            self.mean_episode_reward,
            self.success_rate,
            d.policy_loss,
            d.value_loss,
            d.entropy,
            d.approx_kl,
            d.clip_fraction,
            d.bc_loss
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        r.write_to(&mut out)?;
    }
    Ok(())
}

/// Collects one rollout and applies one update. Returns the metrics row.
pub fn train_iteration<P: Policy>(
    learner: &mut PpoLearner,
    policy: &mut P,
    runners: &mut [EnvRunner],
    update: usize,
    env_steps: u64,
    rng: &mut SimRng,
) -> Result<MetricsRow> {
    let n = learner.config.rollout_steps;
    let roll = collect_rollouts(runners, policy, &learner.value, n, rng)?;
    let batch = SampleBatch::from_trajectories(&roll.trajectories, learner.config.gamma, learner.config.lambda_gae)?;
    let diag = learner.update(policy, &batch, None, rng)?;
    Ok(MetricsRow {
        update,
        env_steps: env_steps + roll.steps as u64,
        episodes: roll.episodes.len(),
        mean_episode_reward: roll.mean_reward(),
        success_rate: roll.success_rate(),
        diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Variant;
    use crate::policy::{CompositePolicy, GaussianPolicy};
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn traj(rewards: &[f64], values: &[f64], dones: &[bool]) -> Trajectory {
        let n = rewards.len();
        Trajectory {
            obs_dim: 1,
            raw_dim: 1,
            obs: vec![0.0; n],
            raw: vec![0.0; n],
            log_probs: vec![0.0; n],
            rewards: rewards.to_vec(),
            values: values.to_vec(),
            dones: dones.to_vec(),
            steps: (0..n as u32).collect(),
        }
    }

    #[test]
    fn gae_single_step() {
        let t = traj(&[1.0], &[0.0, 0.0], &[true]);
        let (a, r) = compute_gae(&t, 1.0, 1.0).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let v = [0.3, -0.2, 0.5, 0.7, 0.1];
        let t = traj(&[0.0, 1.0, 0.0, 1.0], &v, &[false; 4]);
        let (a, _) = compute_gae(&t, 0.9, 0.0).unwrap();
        for i in 0..4 {
            let td = t.rewards[i] + 0.9 * v[i + 1] - v[i];
            assert!((a[i] - td).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_lambda_one_is_monte_carlo() {
        let v = [0.4, 0.1, -0.3, 0.9, 0.0];
        let r = [0.0, 1.0, 0.0, 1.0];
        let t = traj(&r, &v, &[false, false, false, true]);
        let g = 0.97;
        let (a, _) = compute_gae(&t, g, 1.0).unwrap();
        for i in 0..4 {
            let mc: f64 = (i..4).map(|k| g.powi((k - i) as i32) * r[k]).sum();
            assert!((a[i] - (mc - v[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn gae_three_step_hand_recursion() {
        let (g, l) = (0.99, 0.95);
        let t = traj(&[0.0, 0.0, 1.0], &[0.5, 0.6, 0.7, 0.0], &[false, false, true]);
        let (a, r) = compute_gae(&t, g, l).unwrap();
        let d2 = 1.0 - 0.7;
        let d1 = 0.0 + g * 0.7 - 0.6;
        let d0 = 0.0 + g * 0.6 - 0.5;
        let a2 = d2;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        for (x, y) in a.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((r[0] - (a0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gae_length_mismatch() {
        let t = traj(&[0.0, 1.0], &[0.0, 0.0], &[false, true]);
        assert!(matches!(compute_gae(&t, 0.9, 0.9), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn normalized_advantages() {
        let mut a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let m = a.iter().sum::<f64>() / n;
        let s = (a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-9);
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clipping_zeroes_the_gradient() {
        let (obj, d) = clipped_surrogate(1.5, 2.0, 0.2);
        assert!((obj - 1.2 * 2.0).abs() < 1e-15);
        assert_eq!(d, 0.0);
        let (obj, d) = clipped_surrogate(1.1, 2.0, 0.2);
        assert!((obj - 2.2).abs() < 1e-15);
        assert!((d - 2.2).abs() < 1e-15);
        let (_, d) = clipped_surrogate(0.5, -1.0, 0.2);
        assert_eq!(d, 0.0);
    }

    fn bandit_batch(policy: &CompositePolicy, obs: &[f64], actions: &[[f64; 4]], adv: &[f64]) -> SampleBatch {
        let mut b = SampleBatch {
            obs_dim: obs.len(),
            raw_dim: 4,
            obs: Vec::new(),
            raw: Vec::new(),
            old_log_probs: Vec::new(),
            advantages: adv.to_vec(),
            returns: vec![0.0; adv.len()],
        };
        for a in actions {
            b.obs.extend_from_slice(obs);
            b.raw.extend_from_slice(a);
            b.old_log_probs.push(policy.distribution(obs).unwrap().log_prob(a));
        }
        b
    }

    fn obs13() -> Vec<f64> {
        vec![0.0, 0.0, 0.15, 0.08, 0.05, -0.02, 0.025, 0.05, -0.02, -0.125, 0.1, 0.1, 0.2]
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let mut r = rng(1);
        let mut pol = CompositePolicy::init(4, &[16, 16], &mut r).unwrap();
        let value = ValueNet::init(View::PositionsAndGoal, &[16], &mut r).unwrap();
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        let mut learner = PpoLearner::new(&pol, value, cfg).unwrap();
        let o = obs13();
        let batch = bandit_batch(&pol, &o, &[[0.1, 0.2, -0.1, 0.0], [0.3, 0.0, 0.0, 0.5]], &[0.0, 0.0]);
        let before = pol.params().clone();
        let vbefore = learner.value.params.clone();
        learner.update(&mut pol, &batch, None, &mut r).unwrap();
        assert_eq!(before, *pol.params());
        assert_ne!(vbefore, learner.value.params);
    }

    #[test]
    fn bandit_moves_mean_toward_rewarded_action() {
        let mut r = rng(2);
        let mut pol = CompositePolicy::init(4, &[16, 16], &mut r).unwrap();
        let value = ValueNet::init(View::PositionsAndGoal, &[16], &mut r).unwrap();
        let cfg = PpoConfig {
            epochs_per_update: 1,
            entropy_coef: 0.0,
            lr: 1e-3,
            ..PpoConfig::default()
        };
        let mut learner = PpoLearner::new(&pol, value, cfg).unwrap();
        let o = obs13();
        let mut prev = pol.distribution(&o).unwrap().mu[0];
        for _ in 0..100 {
            let batch = bandit_batch(&pol, &o, &[[0.5, 0.0, 0.0, 0.0], [-0.5, 0.0, 0.0, 0.0]], &[1.0, -1.0]);
            learner.update(&mut pol, &batch, None, &mut r).unwrap();
            let mu = pol.distribution(&o).unwrap().mu[0];
            assert!(mu > prev, "mean moved from {prev} to {mu}");
            prev = mu;
        }
    }

    #[test]
    fn frozen_parameters_are_bitwise_untouched() {
        let mut r = rng(3);
        let mut pol = CompositePolicy::init(4, &[16, 16], &mut r).unwrap();
        pol.set_freeze_primitives(true);
        let value = ValueNet::init(View::PositionsAndGoal, &[16], &mut r).unwrap();
        let mut learner = PpoLearner::new(&pol, value, PpoConfig::default()).unwrap();
        let prims = pol.current_primitives();
        let o = obs13();
        let batch = bandit_batch(&pol, &o, &[[0.5, 0.1, 0.0, 0.0], [-0.5, 0.0, 0.2, 0.0]], &[1.0, -1.0]);
        let mut q = DemoQueue::new(4);
        q.push(Demo {
            obs_dim: 13,
            raw_dim: 4,
            obs: o.clone(),
            raw: vec![0.2, 0.2, 0.2, 0.2],
        });
        let gate_before = pol.gate_params();
        learner.update(&mut pol, &batch, Some(&q), &mut r).unwrap();
        assert_eq!(prims.fingerprint(), pol.current_primitives().fingerprint());
        assert_ne!(gate_before, pol.gate_params());
    }

    #[test]
    fn bc_with_zero_coefficient_is_a_no_op() {
        let mut r = rng(4);
        let mut pol = CompositePolicy::init(4, &[16, 16], &mut r).unwrap();
        let mut opt = AdamState::new(pol.params().layout().to_vec(), 1e-3).unwrap();
        let demo = Demo {
            obs_dim: 13,
            raw_dim: 4,
            obs: obs13(),
            raw: vec![0.3, -0.2, 0.1, 0.4],
        };
        let before = pol.params().clone();
        bc_update(&mut pol, &mut opt, &demo, 0.0, 0.5).unwrap();
        assert_eq!(before, *pol.params());
        let empty = Demo {
            obs: vec![],
            raw: vec![],
            ..demo
        };
        assert!(bc_update(&mut pol, &mut opt, &empty, 0.5, 0.5).is_err());
    }

    #[test]
    fn bc_overfits_one_sample() {
        let mut r = rng(5);
        let mut pol = CompositePolicy::init(4, &[32, 32], &mut r).unwrap();
        let mut opt = AdamState::new(pol.params().layout().to_vec(), 1e-3).unwrap();
        let target = [0.3, -0.2, 0.1, 0.4];
        let demo = Demo {
            obs_dim: 13,
            raw_dim: 4,
            obs: obs13(),
            raw: target.to_vec(),
        };
        for _ in 0..500 {
            bc_update(&mut pol, &mut opt, &demo, 0.5, 10.0).unwrap();
        }
        let mu = pol.distribution(&obs13()).unwrap().mu;
        for j in 0..4 {
            assert!((mu[j] - target[j]).abs() < 0.01, "{mu:?}");
        }
    }

    #[test]
    fn demo_queue_evicts_oldest() {
        let mut q = DemoQueue::new(2);
        for i in 0..3 {
            q.push(Demo {
                obs_dim: 1,
                raw_dim: 1,
                obs: vec![i as f64],
                raw: vec![i as f64],
            });
        }
        let firsts: Vec<f64> = q.iter().map(|d| d.obs[0]).collect();
        assert_eq!(firsts, vec![1.0, 2.0]);
    }

    #[test]
    fn rollouts_of_one_horizon_make_one_episode() {
        let mut r = rng(6);
        let task = TaskSpec::new(Variant::Reach);
        let pol = GaussianPolicy::monolithic(View::PositionsAndGoal, &[16], &mut r).unwrap();
        let value = ValueNet::init(View::PositionsAndGoal, &[16], &mut r).unwrap();
        let mut pool = EnvRunner::pool(&task, View::PositionsAndGoal, RewardMode::EveryStep, 1).unwrap();
        let roll = collect_rollouts(&mut pool, &pol, &value, task.horizon as usize, &mut r).unwrap();
        assert_eq!(roll.steps, 50);
        assert_eq!(roll.episodes.len(), 1);
        assert_eq!(roll.trajectories.len(), 1);
        assert_eq!(roll.trajectories[0].len(), 50);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let run = || {
            let mut r = rng(7);
            let task = TaskSpec::new(Variant::Pretrain);
            let pol = GaussianPolicy::monolithic(View::PositionsAndGoal, &[16], &mut r).unwrap();
            let value = ValueNet::init(View::PositionsAndGoal, &[16], &mut r).unwrap();
            let mut pool = EnvRunner::pool(&task, View::PositionsAndGoal, RewardMode::EveryStep, 3).unwrap();
            collect_rollouts(&mut pool, &pol, &value, 170, &mut r).unwrap().trajectories
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.iter().map(Trajectory::len).sum::<usize>(), 170);
    }
}
