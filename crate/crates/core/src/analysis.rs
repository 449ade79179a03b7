//! Coverage of the workspace under random primitive compositions, and the
//! finite-difference gradient checks.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;

use crate::env::{observe, Action, RewardMode, TaskSpec, Variant, Vec3, View};
use crate::error::{Error, Result};
use crate::nn::{max_relative_error, Activation, MlpSpec};
use crate::policy::{compose, CompositePolicy, GateOutput, GaussianPolicy, Policy, PolicyCache, Primitives, GATE_FLOOR};
use crate::ppo::{bc_loss_and_grad, Demo};
use crate::SimRng;

pub const COVERAGE_CELL: f64 = 0.05;
pub const DEFAULT_SKILLS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub n_skills: usize,
    pub cell_size: f64,
    pub visited_cells: usize,
    pub total_cells: usize,
    pub visited_fraction: f64,
    pub start: Vec3,
    pub gates: Vec<Vec<f64>>,
    /// Object positions per composition, initial position included.
    pub trajectories: Vec<Vec<Vec3>>,
}

/// Rolls out `n_skills` fixed random gate vectors, each weight drawn
/// uniformly from `[GATE_FLOOR, 1]`, from one common reset of `task`, with
/// actions set to the composite mean. Counts the grid cells of the
/// workspace that the object visits.
pub fn coverage(
    prims: &Primitives,
    task: &TaskSpec,
    n_skills: usize,
    cell_size: f64,
    rng: &mut SimRng,
) -> Result<CoverageReport> {
    if n_skills == 0 || cell_size <= 0.0 {
        return Err(Error::Config("coverage needs n_skills >= 1 and a positive cell size".into()));
    }
    let (start, goal) = task.reset(rng)?;
    let ws = task.workspace;
    let dims: [usize; 3] = std::array::from_fn(|i| ((ws.extents[i] / cell_size) - 1e-9).ceil().max(1.0) as usize);
    let lo = ws.lo();
    let cell_of = |p: Vec3| -> Option<[usize; 3]> {
        if !ws.contains(p) {
            return None;
        }
        Some(std::array::from_fn(|i| (((p[i] - lo[i]) / cell_size) as usize).min(dims[i] - 1)))
    };
    let mut visited = BTreeSet::new();
    let mut gates = Vec::with_capacity(n_skills);
    let mut trajectories = Vec::with_capacity(n_skills);
    for _ in 0..n_skills {
        let weights: Vec<f64> = (0..prims.k).map(|_| rng.random_range(GATE_FLOOR..=1.0)).collect();
        let gate = GateOutput {
            weights: weights.clone(),
        };
        let mut state = start.clone();
        let mut path = vec![state.obj_pos];
        visited.extend(cell_of(state.obj_pos));
        loop {
            let obs = observe(&state, &goal, View::PositionsOnly);
            let d = compose(&prims.outputs(&obs)?, &gate)?;
            let tr = task.step(&state, &Action::from_slice(&d.mu).clamped(), &goal, RewardMode::Silent)?;
            state = tr.state;
            path.push(state.obj_pos);
            visited.extend(cell_of(state.obj_pos));
            if tr.done {
                break;
            }
        }
        gates.push(weights);
        trajectories.push(path);
    }
    let total = dims.iter().product();
    Ok(CoverageReport {
        n_skills,
        cell_size,
        visited_cells: visited.len(),
        total_cells: total,
        visited_fraction: visited.len() as f64 / total as f64,
        start: start.obj_pos,
        gates,
        trajectories,
    })
}

/// Top-down SVG of the object trajectories, one polyline per composition.
/// Stroke opacity encodes the mean height of the trajectory.
pub fn coverage_svg<W: Write>(mut out: W, report: &CoverageReport, task: &TaskSpec) -> std::io::Result<()> {
    let ws = task.workspace;
    let (lo, hi) = (ws.lo(), ws.hi());
    let size = 400.0;
    let sx = size / (hi[0] - lo[0]);
    let sy = size / (hi[1] - lo[1]);
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )?;
    writeln!(out, r##"<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff" stroke="#000000"/>"##)?;
    let n = report.trajectories.len().max(1);
    for (i, path) in report.trajectories.iter().enumerate() {
        let mean_z = path.iter().map(|p| p[2]).sum::<f64>() / path.len().max(1) as f64;
        let opacity = 0.35 + 0.65 * ((mean_z - ws.rest_height()) / (hi[2] - ws.rest_height())).clamp(0.0, 1.0);
        let pts: Vec<String> = path
            .iter()
            .map(|p| format!("{:.2},{:.2}", (p[0] - lo[0]) * sx, (hi[1] - p[1]) * sy))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="hsl({},70%,45%)" stroke-width="2" stroke-opacity="{opacity:.3}" points="{}"/>"#,
            360 * i / n,
            pts.join(" ")
        )?;
    }
    let s = report.start;
    writeln!(
        out,
        r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#000000"/>"##,
        (s[0] - lo[0]) * sx,
        (hi[1] - s[1]) * sy
    )?;
    writeln!(out, "</svg>")
}

/// Worst relative error of one finite-difference suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub configs: usize,
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
    pub worst: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p)?;
        p[i] = x[i] - h;
        let down = f(&p)?;
        p[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

fn random_hidden(rng: &mut SimRng) -> Vec<usize> {
    (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect()
}

fn randomize(values: &mut [f64], rng: &mut SimRng, scale: f64) {
    for v in values {
        *v = rng.random_range(-scale..scale);
    }
}

fn random_vec(n: usize, rng: &mut SimRng, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Observation in physical units, roughly inside the workspace.
fn random_obs(view: View, rng: &mut SimRng) -> Vec<f64> {
    let mut o = random_vec(view.dim(), rng, 0.15);
    if view == View::Privileged {
        o[view.dim() - 1] = f64::from(rng.random_range(0..50u32));
    }
    o
}

/// Runs every finite-difference suite. With `corrupt_backward` the analytic
/// gradients of the network suite are deliberately perturbed.
pub fn gradcheck(seed: u64, corrupt_backward: bool) -> Result<GradcheckReport> {
    use rand::SeedableRng;
    let mut rng = SimRng::seed_from_u64(seed);
    let suites = vec![
        mlp_suite(&mut rng, 50, corrupt_backward)?,
        composite_suite(&mut rng, 30)?,
        monolithic_suite(&mut rng, 30)?,
        bc_suite(&mut rng, 30)?,
    ];
    let worst = suites.iter().map(|s| s.worst).fold(0.0, f64::max);
    Ok(GradcheckReport {
        suites,
        worst,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

pub fn mlp_suite(rng: &mut SimRng, configs: usize, corrupt: bool) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
        let spec = MlpSpec::new(rng.random_range(1..=6), &random_hidden(rng), rng.random_range(1..=4), act)?;
        let mut params = spec.init(rng, 1.0);
        randomize(params.values_mut(), rng, 0.8);
        let x = random_vec(spec.input_dim, rng, 1.0);
        let g = random_vec(spec.output_dim, rng, 1.0);
        let (mut pg, ig) = spec.backward(&params, &x, &g)?;
        if corrupt {
            pg.values_mut().iter_mut().for_each(|v| *v *= 1.01);
        }
        let dot = |y: Vec<f64>| y.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let fd_p = fd_gradient(|p| Ok(dot(spec.forward_slice(p, &x, 1)?)), params.values(), FD_STEP)?;
        let fd_x = fd_gradient(|xi| Ok(dot(spec.forward(&params, xi)?)), &x, FD_STEP)?;
        worst = worst
            .max(max_relative_error(pg.values(), &fd_p))
            .max(max_relative_error(&ig, &fd_x));
    }
    Ok(SuiteResult {
        name: "mlp",
        configs,
        worst,
    })
}

fn random_composite(rng: &mut SimRng) -> Result<CompositePolicy> {
    let k = rng.random_range(1..=5);
    let mut p = CompositePolicy::init(k, &random_hidden(rng), rng)?;
    randomize(p.params_mut().values_mut(), rng, 0.5);
    Ok(p)
}

fn policy_log_prob_check<P: Policy + Clone>(policy: &P, obs: &[f64], raw: &[f64]) -> Result<f64> {
    let cache = policy.evaluate_batch(obs, raw, 1)?;
    let mut grad = vec![0.0; policy.params().len()];
    policy.backward_batch(&cache, &[1.0], &[0.0], &mut grad)?;
    let mut probe = policy.clone();
    let fd = fd_gradient(
        |p| {
            probe.params_mut().values_mut().copy_from_slice(p);
            Ok(probe.evaluate_batch(obs, raw, 1)?.log_probs()[0])
        },
        policy.params().values(),
        FD_STEP,
    )?;
    Ok(max_relative_error(&grad, &fd))
}

pub fn composite_suite(rng: &mut SimRng, configs: usize) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let p = random_composite(rng)?;
        let obs = random_obs(View::PositionsAndGoal, rng);
        let raw = random_vec(4, rng, 1.0);
        worst = worst.max(policy_log_prob_check(&p, &obs, &raw)?);
    }
    Ok(SuiteResult {
        name: "composite_log_prob",
        configs,
        worst,
    })
}

pub fn monolithic_suite(rng: &mut SimRng, configs: usize) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let view = if rng.random_bool(0.5) { View::Privileged } else { View::PositionsAndGoal };
        let mut p = GaussianPolicy::monolithic(view, &random_hidden(rng), rng)?;
        randomize(p.params_mut().values_mut(), rng, 0.5);
        let obs = random_obs(view, rng);
        let raw = random_vec(4, rng, 1.0);
        worst = worst.max(policy_log_prob_check(&p, &obs, &raw)?);
    }
    Ok(SuiteResult {
        name: "monolithic_log_prob",
        configs,
        worst,
    })
}

pub fn bc_suite(rng: &mut SimRng, configs: usize) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let p = random_composite(rng)?;
        let n = rng.random_range(1..=5);
        let mut demo = Demo {
            obs_dim: 13,
            raw_dim: 4,
            obs: Vec::new(),
            raw: random_vec(4 * n, rng, 1.0),
        };
        for _ in 0..n {
            demo.obs.extend(random_obs(View::PositionsAndGoal, rng));
        }
        let coef = rng.random_range(0.1..1.0);
        let (_, grad) = bc_loss_and_grad(&p, &demo, coef)?;
        let mut probe = p.clone();
        let fd = fd_gradient(
            |x| {
                probe.params_mut().values_mut().copy_from_slice(x);
                let c = probe.evaluate_batch(&demo.obs, &demo.raw, n)?;
                Ok(-coef * c.log_probs().iter().sum::<f64>() / n as f64)
            },
            p.params().values(),
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(&grad, &fd));
    }
    Ok(SuiteResult {
        name: "bc_loss",
        configs,
        worst,
    })
}

/// Pretrain-task coverage with the default settings.
pub fn pretrain_coverage(prims: &Primitives, n_skills: usize, rng: &mut SimRng) -> Result<CoverageReport> {
    coverage(prims, &TaskSpec::new(Variant::Pretrain), n_skills, COVERAGE_CELL, rng)
}
