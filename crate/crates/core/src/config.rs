//! Run configuration: a TOML file with one section per command, overridable
//! from the command line.
//!
//! ```toml
//! seed = 1
//! out = "runs"
//!
//! [pretrain]
//! budget_steps = 2000000
//! [pretrain.bob_ppo]
//! lr = 0.0003
//!
//! [train]
//! task = "wall"
//! agent = "orchestrator"
//! checkpoint = "runs/pretrain-.../primitives.ckpt"
//!
//! [eval]
//! checkpoint = "runs/pretrain-.../stage-100.ckpt"
//! tasks = ["larger", "wall"]
//!
//! [coverage]
//! checkpoint = "runs/pretrain-.../stage-010.ckpt"
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asp::{AspRewardConfig, PretrainConfig};
use crate::downstream::{AgentKind, DownstreamConfig};
use crate::env::Variant;
use crate::error::{Error, Result};
use crate::ppo::PpoConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub coverage: CoverageSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoSection {
    pub gamma: Option<f64>,
    pub lambda_gae: Option<f64>,
    pub clip_eps: Option<f64>,
    pub epochs_per_update: Option<usize>,
    pub minibatch_size: Option<usize>,
    pub value_coef: Option<f64>,
    pub entropy_coef: Option<f64>,
    pub bc_coef: Option<f64>,
    pub lr: Option<f64>,
    pub rollout_steps: Option<usize>,
    pub max_grad_norm: Option<f64>,
}

impl PpoSection {
    pub fn apply(&self, mut c: PpoConfig) -> PpoConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            gamma,
            lambda_gae,
            clip_eps,
            epochs_per_update,
            minibatch_size,
            value_coef,
            entropy_coef,
            bc_coef,
            lr,
            rollout_steps,
            max_grad_norm
        );
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub budget_steps: Option<u64>,
    pub episodes_per_iteration: Option<usize>,
    pub k: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub demo_capacity: Option<usize>,
    pub r_valid: Option<f64>,
    pub r_difficult: Option<f64>,
    pub r_invalid: Option<f64>,
    pub stages: Option<Vec<f64>>,
    pub stats_window: Option<usize>,
    /// Checkpoint of an earlier run of the same configuration to resume.
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub alice_ppo: PpoSection,
    #[serde(default)]
    pub bob_ppo: PpoSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub task: Option<String>,
    pub agent: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub budget_steps: Option<u64>,
    pub n_envs: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub eval_episodes: Option<usize>,
    #[serde(default)]
    pub ppo: PpoSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub tasks: Option<Vec<String>>,
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSection {
    pub checkpoint: Option<PathBuf>,
    pub n_skills: Option<usize>,
    pub cell_size: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub task: Option<String>,
    pub budget: Option<u64>,
}

pub fn required<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative paths in the file relative to the file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.out);
        fix(&mut self.pretrain.resume);
        fix(&mut self.train.checkpoint);
        fix(&mut self.eval.checkpoint);
        fix(&mut self.coverage.checkpoint);
    }

    /// Applies command-line overrides relevant to `command`.
    pub fn apply(&mut self, command: &str, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        match command {
            "pretrain" => {
                if o.budget.is_some() {
                    self.pretrain.budget_steps = o.budget;
                }
                if o.checkpoint.is_some() {
                    self.pretrain.resume = o.checkpoint.clone();
                }
            }
            "train" => {
                if o.budget.is_some() {
                    self.train.budget_steps = o.budget;
                }
                if o.task.is_some() {
                    self.train.task = o.task.clone();
                }
                if o.checkpoint.is_some() {
                    self.train.checkpoint = o.checkpoint.clone();
                }
            }
            "eval" => {
                if let Some(t) = &o.task {
                    self.eval.tasks = Some(vec![t.clone()]);
                }
                if o.checkpoint.is_some() {
                    self.eval.checkpoint = o.checkpoint.clone();
                }
            }
            "coverage"
                if o.checkpoint.is_some() => {
                    self.coverage.checkpoint = o.checkpoint.clone();
                }
            _ => {}
        }
    }

    pub fn seed(&self) -> Result<u64> {
        required(&self.seed, "seed")
    }

    /// Hex digest of the canonical form of the configuration. The seed, the
    /// output root and the resume point do not contribute.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = None;
        c.out = None;
        c.pretrain.resume = None;
        let text = toml::to_string(&c).expect("serializable config");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// `<out>/<command>-<hash>-seed<seed>`.
    pub fn run_dir(&self, command: &str) -> Result<PathBuf> {
        let root = self.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
        Ok(root.join(format!("{command}-{}-seed{}", self.hash(), self.seed()?)))
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let s = &self.pretrain;
        let d = PretrainConfig::default();
        let cfg = PretrainConfig {
            budget_steps: required(&s.budget_steps, "pretrain.budget_steps")?,
            episodes_per_iteration: s.episodes_per_iteration.unwrap_or(d.episodes_per_iteration),
            alice_ppo: s.alice_ppo.apply(d.alice_ppo),
            bob_ppo: s.bob_ppo.apply(d.bob_ppo),
            rewards: AspRewardConfig {
                r_valid: s.r_valid.unwrap_or(d.rewards.r_valid),
                r_difficult: s.r_difficult.unwrap_or(d.rewards.r_difficult),
                r_invalid: s.r_invalid.unwrap_or(d.rewards.r_invalid),
            },
            demo_capacity: s.demo_capacity.unwrap_or(d.demo_capacity),
            k: s.k.unwrap_or(d.k),
            hidden: s.hidden.clone().unwrap_or(d.hidden),
            stages: s.stages.clone().unwrap_or(d.stages),
            stats_window: s.stats_window.unwrap_or(d.stats_window),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_task(&self) -> Result<Variant> {
        required(&self.train.task, "train.task")?.parse()
    }

    pub fn train_agent(&self) -> Result<AgentKind> {
        required(&self.train.agent, "train.agent")?.parse()
    }

    pub fn downstream_config(&self) -> Result<DownstreamConfig> {
        let s = &self.train;
        let d = DownstreamConfig::default();
        let cfg = DownstreamConfig {
            ppo: s.ppo.apply(d.ppo),
            budget_steps: s.budget_steps.unwrap_or(d.budget_steps),
            n_envs: s.n_envs.unwrap_or(d.n_envs),
            hidden: s.hidden.clone().unwrap_or(d.hidden),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_tasks(&self) -> Result<Vec<Variant>> {
        match &self.eval.tasks {
            None => Ok(Variant::DOWNSTREAM.to_vec()),
            Some(ts) => ts.iter().map(|t| t.parse()).collect(),
        }
    }
}
