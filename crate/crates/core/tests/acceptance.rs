//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! pretraining runs (3 seeds at the default budget) are shared by the
//! criteria that need them and dominate the runtime.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};

use aspmcp::analysis::{coverage, gradcheck, COVERAGE_CELL, DEFAULT_SKILLS};
use aspmcp::asp::{load_primitives, pretrain, PretrainConfig, PretrainState};
use aspmcp::checkpoint::Checkpoint;
use aspmcp::downstream::{
    eval_asp_only, evaluate, train_orchestrator, train_scratch, Agent, AgentKind, DownstreamConfig,
};
use aspmcp::env::{TaskSpec, Variant};
use aspmcp::policy::{compose, CompositePolicy, GateOutput, PrimitiveOutput, Primitives, GATE_FLOOR};
use aspmcp::ppo::{compute_gae, PpoConfig, Trajectory};
use aspmcp::SimRng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {n} {name}: {} ({}; {:.1}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        t.elapsed().as_secs_f64()
    );
    v.pass
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

// ---------------------------------------------------------------- 1

/// Weighted sum of log-densities, the unnormalized log of the weighted
/// product, up to a constant in `a`.
fn weighted_log_product(m: &[f64], v: &[f64], w: &[f64], a: f64) -> f64 {
    (0..w.len())
        .map(|i| w[i] * (-(a - m[i]).powi(2) / (2.0 * v[i]) - 0.5 * (2.0 * std::f64::consts::PI * v[i]).ln()))
        .sum()
}

/// Mean and variance of the normalized product by fitting the quadratic
/// log-density through three points.
fn product_by_fit(m: &[f64], v: &[f64], w: &[f64]) -> (f64, f64) {
    let c = m.iter().sum::<f64>() / m.len() as f64;
    let f = |a: f64| weighted_log_product(m, v, w, a);
    let (lo, mid, hi) = (f(c - 1.0), f(c), f(c + 1.0));
    let curvature = lo - 2.0 * mid + hi;
    let slope = (hi - lo) / 2.0;
    (c - slope / curvature, -1.0 / curvature)
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut rng = SimRng::seed_from_u64(11);
    let (mut worst_oracle, mut worst_scale, mut worst_onehot): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let a = rng.random_range(1..=6);
        let means: Vec<f64> = (0..k * a).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vars: Vec<f64> = (0..k * a).map(|_| rng.random_range(0.01..2.0)).collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(GATE_FLOOR..=1.0)).collect();
        let prims = PrimitiveOutput {
            k,
            action_dim: a,
            means: means.clone(),
            variances: vars.clone(),
        };
        let d = compose(&prims, &GateOutput { weights: weights.clone() }).unwrap();
        for j in 0..a {
            let m: Vec<f64> = (0..k).map(|i| means[i * a + j]).collect();
            let v: Vec<f64> = (0..k).map(|i| vars[i * a + j]).collect();
            let (mu, var) = product_by_fit(&m, &v, &weights);
            // the fit is exact up to cancellation; compare the mean on the
            // scale of the action range
            worst_oracle = worst_oracle.max((d.mu[j] - mu).abs() / mu.abs().max(1.0)).max(rel(d.variance[j], var));
        }

        let c = rng.random_range(0.1..10.0);
        let scaled: Vec<f64> = weights.iter().map(|w| (w * c).max(GATE_FLOOR)).collect();
        if scaled.iter().zip(&weights).all(|(s, w)| *s == w * c) {
            let e = compose(&prims, &GateOutput { weights: scaled }).unwrap();
            for j in 0..a {
                worst_scale = worst_scale.max((e.mu[j] - d.mu[j]).abs()).max(rel(e.variance[j] * c, d.variance[j]));
            }
        }

        // one-hot: primitives of comparable spread, so the floor leakage
        // (K-1) * floor * var_active / var_i stays below 1e-3
        if k >= 2 {
            let active = rng.random_range(0..k);
            let hot: Vec<f64> = (0..k).map(|i| if i == active { 1.0 } else { GATE_FLOOR }).collect();
            let near = PrimitiveOutput {
                k,
                action_dim: a,
                means: (0..k * a).map(|_| rng.random_range(-0.5..0.5)).collect(),
                variances: (0..k * a).map(|_| rng.random_range(0.8..1.0)).collect(),
            };
            let h = compose(&near, &GateOutput { weights: hot }).unwrap();
            for j in 0..a {
                let (m, v) = (near.means[active * a + j], near.variances[active * a + j]);
                worst_onehot = worst_onehot.max((h.mu[j] - m).abs()).max(rel(h.variance[j], v));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst_oracle <= 1e-9 && worst_scale <= 1e-12 && worst_onehot <= 1e-3 && secs < 10.0,
        format!("oracle {worst_oracle:.1e}, uniform scaling {worst_scale:.1e}, one-hot {worst_onehot:.1e}"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let r = gradcheck(2024, false).unwrap();
    let corrupt = gradcheck(2024, true).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let suites: Vec<String> = r.suites.iter().map(|s| format!("{} {:.1e}", s.name, s.worst)).collect();
    verdict(
        r.passed() && !corrupt.passed() && secs < 60.0,
        format!("{}; corrupted backward caught: {}", suites.join(", "), !corrupt.passed()),
    )
}

// ---------------------------------------------------------------- 3

fn trajectory(rewards: &[f64], values: &[f64], dones: &[bool]) -> Trajectory {
    let mut t = Trajectory::new(1, 1);
    for i in 0..rewards.len() {
        t.push(&[0.0], &[0.0], 0.0, rewards[i], values[i], dones[i], i as u32);
    }
    t.finish(values[rewards.len()]);
    t
}

fn criterion_3() -> Verdict {
    let mut rng = SimRng::seed_from_u64(3);
    let (mut worst_mc, mut worst_td): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let gamma = rng.random_range(0.5..1.0);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut values: Vec<f64> = (0..=n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dones = vec![false; n];
        if rng.random_bool(0.5) {
            dones[n - 1] = true;
            values[n] = 0.0;
        }
        let t = trajectory(&rewards, &values, &dones);
        // Monte-Carlo return with bootstrap at the end
        let (adv1, _) = compute_gae(&t, gamma, 1.0).unwrap();
        let mut g = values[n];
        for i in (0..n).rev() {
            g = rewards[i] + gamma * g;
            worst_mc = worst_mc.max((adv1[i] - (g - values[i])).abs());
        }
        let (adv0, _) = compute_gae(&t, gamma, 0.0).unwrap();
        for i in 0..n {
            let td = rewards[i] + gamma * values[i + 1] - values[i];
            worst_td = worst_td.max((adv0[i] - td).abs());
        }
    }
    // 3 steps, gamma 0.9, lambda 0.8, no termination, bootstrap 0.5:
    // deltas 1 + 0.9*0.2 - 0.5 = 0.68, 0 + 0.9*0.1 - 0.2 = -0.11, 2 + 0.9*0.5 - 0.1 = 2.35
    // A2 = 2.35, A1 = -0.11 + 0.72*2.35 = 1.582, A0 = 0.68 + 0.72*1.582 = 1.81904
    let t = trajectory(&[1.0, 0.0, 2.0], &[0.5, 0.2, 0.1, 0.5], &[false, false, false]);
    let (adv, _) = compute_gae(&t, 0.9, 0.8).unwrap();
    let hand = [1.81904, 1.582, 2.35];
    let worst_hand = adv.iter().zip(hand).map(|(a, h)| (a - h).abs()).fold(0.0, f64::max);
    verdict(
        worst_mc <= 1e-10 && worst_td <= 1e-10 && worst_hand <= 1e-12,
        format!("lambda=1 vs MC {worst_mc:.1e}, lambda=0 vs TD {worst_td:.1e}, hand case {worst_hand:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let t = Instant::now();
    let task = TaskSpec::new(Variant::Reach);
    let cfg = DownstreamConfig {
        budget_steps: 300_000,
        ..DownstreamConfig::default()
    };
    let mut rates = Vec::new();
    for seed in SEEDS {
        let mut rng = SimRng::seed_from_u64(seed);
        let (agent, _) = train_scratch(AgentKind::ScratchMonolithic, &task, &cfg, 4, &mut rng).unwrap();
        rates.push(evaluate(&agent, "scratch", &task, 100, seed, &mut rng).unwrap().success_rate);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        rates.iter().all(|&r| r >= 0.95) && secs < 600.0,
        format!("reach success per seed {rates:?} after 3e5 steps"),
    )
}

// ---------------------------------------------------------- pretraining

struct Pretrained {
    seed: u64,
    dir: PathBuf,
    state: PretrainState,
    stage_010: PathBuf,
    stage_100: PathBuf,
}

fn pretrained() -> &'static [Pretrained] {
    static RUNS: OnceLock<Vec<Pretrained>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = std::env::temp_dir().join(format!("aspmcp-acceptance-{}", std::process::id()));
        let cfg = PretrainConfig::default();
        SEEDS
            .iter()
            .map(|&seed| {
                let t = Instant::now();
                let dir = root.join(format!("pretrain-seed{seed}"));
                let state = PretrainState::fresh(&cfg, SimRng::seed_from_u64(seed)).unwrap();
                let (state, out) = pretrain(&cfg, state, &dir).unwrap();
                let stage = |f: f64| out.stages.iter().find(|(x, _)| *x == f).unwrap().1.clone();
                println!(
                    "  pretraining seed {seed}: {} steps ({} Bob) in {:.0}s",
                    state.steps,
                    state.bob_steps,
                    t.elapsed().as_secs_f64()
                );
                Pretrained {
                    seed,
                    stage_010: stage(0.1),
                    stage_100: stage(1.0),
                    dir,
                    state,
                }
            })
            .collect()
    })
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for run in pretrained() {
        let valid: Vec<f64> = run
            .state
            .records
            .iter()
            .filter(|r| r.valid)
            .map(|r| r.displacement())
            .collect();
        let tenth = (valid.len() / 10).max(1);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let first = mean(&valid[..tenth]);
        let last = mean(&valid[valid.len() - tenth..]);
        // Bob's success over the last 20% of his environment steps
        let from = (run.state.bob_steps as f64 * 0.8) as u64;
        let (mut wins, mut episodes) = (0.0, 0usize);
        for m in run.state.bob_metrics.iter().filter(|m| m.env_steps > from) {
            wins += m.success_rate * m.episodes as f64;
            episodes += m.episodes;
        }
        let bob = wins / episodes.max(1) as f64;
        ok &= last > first && bob >= 0.6;
        parts.push(format!(
            "seed {}: displacement {first:.3} -> {last:.3}, Bob {bob:.2}",
            run.seed
        ));
    }
    verdict(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Verdict {
    let task = TaskSpec::new(Variant::Pretrain);
    let mut ok = true;
    let mut parts = Vec::new();
    for run in pretrained() {
        let early = load_primitives(&run.stage_010).unwrap();
        let late = load_primitives(&run.stage_100).unwrap();
        let cov = |p: &Primitives| {
            coverage(p, &task, DEFAULT_SKILLS, COVERAGE_CELL, &mut SimRng::seed_from_u64(run.seed))
                .unwrap()
                .visited_fraction
        };
        let (a, b) = (cov(&early), cov(&late));
        ok &= b >= 3.0 * a;
        parts.push(format!("seed {}: {a:.4} -> {b:.4} ({:.1}x)", run.seed, b / a));
    }
    let mut zero = load_primitives(&pretrained()[0].stage_100).unwrap();
    zero.params.values_mut().fill(0.0);
    let z = coverage(&zero, &task, DEFAULT_SKILLS, COVERAGE_CELL, &mut SimRng::seed_from_u64(0)).unwrap();
    ok &= z.visited_cells == 1;
    parts.push(format!("zero net {} cell", z.visited_cells));
    verdict(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let task = TaskSpec::new(Variant::Wall);
    let cfg = DownstreamConfig {
        budget_steps: 300_000,
        ..DownstreamConfig::default()
    };
    let (mut orch, mut asp, mut scratch) = (0.0, 0.0, 0.0);
    for run in pretrained() {
        let mut rng = SimRng::seed_from_u64(run.seed);
        let prims = load_primitives(&run.stage_100).unwrap();
        let (o, _) = train_orchestrator(&prims, &task, &cfg, &mut rng).unwrap();
        orch += evaluate(&Agent::Gaussian(o), "orchestrator", &task, 100, run.seed, &mut rng)
            .unwrap()
            .success_rate;
        let bob = CompositePolicy::load(&Checkpoint::load(&run.stage_100).unwrap(), "bob").unwrap();
        asp += eval_asp_only(&bob, &task, 100, run.seed, &mut rng).unwrap().success_rate;
        let (s, _) = train_scratch(AgentKind::ScratchMonolithic, &task, &cfg, 4, &mut rng).unwrap();
        scratch += evaluate(&s, "scratch", &task, 100, run.seed, &mut rng).unwrap().success_rate;
    }
    let n = SEEDS.len() as f64;
    let (orch, asp, scratch) = (orch / n, asp / n, scratch / n);
    verdict(
        orch >= asp + 0.2 && orch >= scratch + 0.2,
        format!("Wall mean success: orchestrator {orch:.2}, asp_only {asp:.2}, scratch_monolithic {scratch:.2}"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let ck = &pretrained()[0].stage_100;
    let before = load_primitives(ck).unwrap().fingerprint();
    let cfg = DownstreamConfig {
        ppo: PpoConfig {
            rollout_steps: 500,
            minibatch_size: 100,
            epochs_per_update: 1,
            ..PpoConfig::default()
        },
        budget_steps: 1_000,
        n_envs: 2,
        ..DownstreamConfig::default()
    };
    let mut runs = 0;
    let mut ok = true;
    for kind in AgentKind::ALL {
        for v in Variant::DOWNSTREAM {
            let task = TaskSpec::new(v);
            let mut rng = SimRng::seed_from_u64(runs);
            let agent = match kind {
                AgentKind::FrozenPrimitivesOrchestrator => {
                    let prims = load_primitives(ck).unwrap();
                    let (o, _) = train_orchestrator(&prims, &task, &cfg, &mut rng).unwrap();
                    match o.decoder() {
                        aspmcp::policy::ActionDecoder::Composite(p) => ok &= p.fingerprint() == before,
                        _ => ok = false,
                    }
                    Agent::Gaussian(o)
                }
                AgentKind::AspOnly => {
                    Agent::Composite(CompositePolicy::load(&Checkpoint::load(ck).unwrap(), "bob").unwrap())
                }
                k => train_scratch(k, &task, &cfg, 4, &mut rng).unwrap().0,
            };
            evaluate(&agent, kind.name(), &task, 2, runs, &mut rng).unwrap();
            ok &= load_primitives(ck).unwrap().fingerprint() == before;
            runs += 1;
        }
    }
    verdict(ok, format!("{runs} runs completed, primitives {}", &before[..16]))
}

// ---------------------------------------------------------------- 9

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_aspmcp")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "aspmcp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn csv_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            files.extend(csv_files(&p));
        } else if p.extension().is_some_and(|e| e == "csv") {
            files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    files.sort();
    files
}

fn criterion_9() -> Verdict {
    let work = tempfile::tempdir().unwrap();
    let config = work.path().join("small.toml");
    fs::write(
        &config,
        "seed = 5\n\
         [pretrain]\nbudget_steps = 3000\nepisodes_per_iteration = 8\nhidden = [16]\n\
         [pretrain.alice_ppo]\nrollout_steps = 256\nminibatch_size = 64\n\
         [pretrain.bob_ppo]\nrollout_steps = 256\nminibatch_size = 64\n\
         [train]\nagent = \"scratch_monolithic\"\ntask = \"reach\"\nbudget_steps = 4096\n\
         n_envs = 2\nhidden = [16]\neval_episodes = 10\n\
         [train.ppo]\nrollout_steps = 1024\nminibatch_size = 128\n\
         [eval]\nepisodes = 5\n\
         [coverage]\nn_skills = 8\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let mut trees = Vec::new();
    for attempt in 0..2 {
        let out = work.path().join(format!("out{attempt}"));
        let out_s = out.to_str().unwrap();
        cli(&["pretrain", "--config", cfg, "--out", out_s]);
        let pre = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("pretrain-"))
            .unwrap();
        let stage = pre.join("stage-100.ckpt");
        let stage_s = stage.to_str().unwrap();
        cli(&["train", "--config", cfg, "--out", out_s]);
        cli(&["eval", "--config", cfg, "--out", out_s, "--checkpoint", stage_s]);
        cli(&["coverage", "--config", cfg, "--out", out_s, "--checkpoint", stage_s]);
        cli(&["gradcheck", "--config", cfg, "--out", out_s]);
        trees.push(csv_files(&out));
    }
    let identical = trees[0] == trees[1];
    // run directories embed the checkpoint path, which differs per attempt
    let contents = |t: &[(PathBuf, Vec<u8>)]| t.iter().map(|(_, b)| b.clone()).collect::<Vec<_>>();
    let same_bytes = contents(&trees[0]) == contents(&trees[1]);
    verdict(
        same_bytes && trees[0].len() >= 8,
        format!(
            "{} CSV files across pretrain/train/eval/coverage/gradcheck, byte-identical: {same_bytes}{}",
            trees[0].len(),
            if identical { "" } else { " (run directory names differ)" }
        ),
    )
}

fn main() {
    let t = Instant::now();
    let results = [
        run(1, "composition oracle", criterion_1),
        run(2, "gradient suite", criterion_2),
        run(3, "GAE oracle", criterion_3),
        run(4, "learner sanity", criterion_4),
        run(5, "curriculum signal", criterion_5),
        run(6, "coverage progression", criterion_6),
        run(7, "reuse ordering on Wall", criterion_7),
        run(8, "frozen-primitive invariance", criterion_8),
        run(9, "determinism", criterion_9),
    ];
    if let Some(root) = pretrained().first().and_then(|r| r.dir.parent()) {
        let _ = fs::remove_dir_all(root);
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        results.len(),
        Duration::as_secs_f64(&t.elapsed())
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
