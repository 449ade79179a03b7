//! Gaussian policies: the multiplicative compositional policy (K goal-free
//! primitives weighted by a goal-conditioned gate) and a monolithic policy.
//!
//! Composite per action dimension `j`, with primitive means `m_ij`,
//! per-dimension variances `s_ij` and gate weights `w_i`:
//!
//! ```text
//! precision_j = sum_i w_i / s_ij
//! mu_j        = sum_i (w_i / s_ij) m_ij / precision_j
//! variance_j  = 1 / precision_j
//! ```
//!
//! which is exactly the normalized product `prod_i N(m_i, s_i)^{w_i}`.

use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::env::{Action, View};
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpCache, MlpSpec, ParamVector};
use crate::SimRng;

pub const SIGMA_MIN: f64 = 1e-3;
pub const GATE_FLOOR: f64 = 1e-4;
pub const ACTION_DIM: usize = Action::DIM;
pub const DEFAULT_K: usize = 4;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
/// Final-layer weight scale for freshly initialized policy heads.
pub const HEAD_INIT_SCALE: f64 = 0.01;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-feature input scaling that brings metric observations to O(1).
pub fn input_scale(view: View) -> Vec<f64> {
    let pos = 5.0;
    match view {
        View::Privileged => {
            let mut s = vec![pos, pos, pos, 20.0, 20.0, 20.0, 10.0, 10.0];
            s.extend([pos, pos, pos, 20.0, 20.0, 20.0, pos, pos, pos, 1.0, 1.0, 0.02]);
            s
        }
        View::PositionsOnly => vec![pos, pos, pos, 10.0, pos, pos, pos, pos, pos, pos],
        View::PositionsAndGoal => {
            let mut s = input_scale(View::PositionsOnly);
            s.extend([pos, pos, pos]);
            s
        }
    }
}

pub fn scale_rows(obs: &[f64], scale: &[f64], take: usize, n: usize) -> Result<Vec<f64>> {
    let stride = obs.len() / n.max(1);
    if n == 0 || obs.len() != stride * n || stride < take {
        return Err(Error::DimensionMismatch {
            layer: "observation".into(),
            expected: take * n,
            got: obs.len(),
        });
    }
    let mut out = Vec::with_capacity(take * n);
    for row in obs.chunks_exact(stride) {
        out.extend(row[..take].iter().zip(scale).map(|(v, s)| v * s));
    }
    Ok(out)
}

/// Log-density of a diagonal Gaussian given per-dimension variances.
pub fn gaussian_log_density(mean: &[f64], variance: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(variance)
        .zip(x)
        .map(|((m, v), a)| -0.5 * ((a - m) * (a - m) / v + v.ln() + LN_2PI))
        .sum()
}

pub fn gaussian_entropy(variance: &[f64]) -> f64 {
    variance.iter().map(|v| 0.5 * (LN_2PI + 1.0 + v.ln())).sum()
}

/// Primitive means and variances, row-major `[k, action_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveOutput {
    pub k: usize,
    pub action_dim: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl PrimitiveOutput {
    pub fn mean(&self, i: usize, j: usize) -> f64 {
        self.means[i * self.action_dim + j]
    }

    pub fn variance(&self, i: usize, j: usize) -> f64 {
        self.variances[i * self.action_dim + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub weights: Vec<f64>,
}

/// Gaussian produced by the composition; `variance` is the diagonal of its
/// covariance. The normalizer of the weighted product is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeDistribution {
    pub mu: Vec<f64>,
    pub variance: Vec<f64>,
}

impl CompositeDistribution {
    pub fn log_prob(&self, action: &[f64]) -> f64 {
        gaussian_log_density(&self.mu, &self.variance, action)
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.variance)
    }
}

/// Composition without contract checks.
pub fn compose_raw(means: &[f64], variances: &[f64], weights: &[f64], action_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; action_dim];
    let mut var = vec![0.0; action_dim];
    for j in 0..action_dim {
        let mut precision = 0.0;
        let mut weighted = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let p = w / variances[i * action_dim + j];
            precision += p;
            weighted += p * means[i * action_dim + j];
        }
        mu[j] = weighted / precision;
        var[j] = 1.0 / precision;
    }
    (mu, var)
}

pub fn compose(prims: &PrimitiveOutput, gate: &GateOutput) -> Result<CompositeDistribution> {
    let (k, a) = (prims.k, prims.action_dim);
    if k == 0 || gate.weights.len() != k || prims.means.len() != k * a || prims.variances.len() != k * a {
        return Err(Error::Contract(format!(
            "compose expects {k} weights and {k}x{a} primitive outputs"
        )));
    }
    if let Some(w) = gate.weights.iter().find(|w| !(**w >= GATE_FLOOR)) {
        return Err(Error::Contract(format!("gate weight {w} below floor {GATE_FLOOR}")));
    }
    if let Some(s) = prims.variances.iter().find(|s| !(**s >= SIGMA_MIN)) {
        return Err(Error::Contract(format!("primitive variance {s} below floor {SIGMA_MIN}")));
    }
    if prims.means.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("primitive means".into()));
    }
    let (mu, variance) = compose_raw(&prims.means, &prims.variances, &gate.weights, a);
    Ok(CompositeDistribution { mu, variance })
}

/// Outcome of drawing an action from a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    /// The policy's own (pre-clamp) action variable.
    pub raw: Vec<f64>,
    /// Environment action, clamped to [-1, 1].
    pub action: Action,
    /// Log-density of `raw`.
    pub log_prob: f64,
}

/// Per-sample log-probabilities and entropies of a batch, plus whatever the
/// policy needs to backpropagate through them.
pub trait PolicyCache {
    fn log_probs(&self) -> &[f64];
    fn entropies(&self) -> &[f64];
}

/// A stochastic policy trainable by policy-gradient methods.
pub trait Policy {
    type Cache: PolicyCache;

    fn obs_dim(&self) -> usize;
    fn raw_dim(&self) -> usize;
    fn params(&self) -> &ParamVector;
    fn params_mut(&mut self) -> &mut ParamVector;

    /// Parameter ranges that training must leave untouched.
    fn frozen_ranges(&self) -> Vec<Range<usize>> {
        Vec::new()
    }

    fn sample(&self, obs: &[f64], rng: &mut SimRng) -> Result<PolicySample>;

    /// Deterministic action (distribution mean, clamped).
    fn mean_action(&self, obs: &[f64]) -> Result<Action>;

    fn evaluate_batch(&self, obs: &[f64], raw: &[f64], n: usize) -> Result<Self::Cache>;

    /// Accumulates `sum_b dlogp[b] * grad logp_b + dent[b] * grad H_b`.
    fn backward_batch(&self, cache: &Self::Cache, dlogp: &[f64], dent: &[f64], grad: &mut [f64]) -> Result<()>;
}

fn draw_gaussian(mean: &[f64], variance: &[f64], rng: &mut SimRng) -> Vec<f64> {
    mean.iter()
        .zip(variance)
        .map(|(m, v)| {
            let z: f64 = StandardNormal.sample(rng);
            m + v.sqrt() * z
        })
        .collect()
}

fn clamp_action(raw: &[f64]) -> Action {
    Action::from_slice(raw).clamped()
}

/// The K primitives of a compositional policy, detached from any gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitives {
    pub k: usize,
    pub action_dim: usize,
    pub spec: MlpSpec,
    /// Layers `prim{i}.l{l}.{w,b}`.
    pub params: ParamVector,
}

impl Primitives {
    pub fn init(k: usize, hidden: &[usize], rng: &mut SimRng) -> Result<Self> {
        let spec = MlpSpec::new(View::PositionsOnly.dim(), hidden, 2 * ACTION_DIM, Activation::Tanh)?;
        let mut params = ParamVector::zeros(Vec::new());
        for i in 0..k {
            params.append(&format!("prim{i}."), &spec.init(rng, HEAD_INIT_SCALE));
        }
        Ok(Self {
            k,
            action_dim: ACTION_DIM,
            spec,
            params,
        })
    }

    /// Evaluates all primitives, with parameters `params` laid out like
    /// `self.params`, on a batch of observations whose first ten features are
    /// the positions-only view.
    fn forward_batch(&self, params: &[f64], obs: &[f64], n: usize) -> Result<Vec<MlpCache>> {
        let scale = input_scale(View::PositionsOnly);
        let x = scale_rows(obs, &scale, self.spec.input_dim, n)?;
        let np = self.spec.num_params();
        (0..self.k)
            .map(|i| self.spec.forward_cached(&params[i * np..(i + 1) * np], &x, n))
            .collect()
    }

    pub fn outputs(&self, obs: &[f64]) -> Result<PrimitiveOutput> {
        self.outputs_with(self.params.values(), obs)
    }

    fn outputs_with(&self, params: &[f64], obs: &[f64]) -> Result<PrimitiveOutput> {
        let caches = self.forward_batch(params, obs, 1)?;
        let a = self.action_dim;
        let mut means = Vec::with_capacity(self.k * a);
        let mut variances = Vec::with_capacity(self.k * a);
        for c in &caches {
            let out = c.output();
            means.extend_from_slice(&out[..a]);
            variances.extend(out[a..2 * a].iter().map(|r| softplus(*r) + SIGMA_MIN));
        }
        if means.iter().chain(&variances).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("primitive network output".into()));
        }
        Ok(PrimitiveOutput {
            k: self.k,
            action_dim: a,
            means,
            variances,
        })
    }

    /// Rebuilds primitives from `prim{i}.*` layers.
    pub fn from_params(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        let np = spec.num_params();
        if np == 0 || !params.len().is_multiple_of(np) || spec.output_dim != 2 * ACTION_DIM {
            return Err(Error::LayoutMismatch(format!("primitive parameters do not fit {spec}")));
        }
        let k = params.len() / np;
        for i in 0..k {
            let net = params
                .extract(&format!("prim{i}."))
                .ok_or_else(|| Error::LayoutMismatch(format!("missing primitive {i}")))?;
            spec.check_layout(&net)?;
        }
        Ok(Self {
            k,
            action_dim: ACTION_DIM,
            spec,
            params,
        })
    }

    pub const CHECKPOINT_KIND: &'static str = "frozen-primitives";

    /// Stores the primitives under `name` (spec in metadata).
    pub fn store(&self, ck: &mut Checkpoint, name: &str) {
        ck.meta.insert(format!("{name}.spec"), self.spec.to_string());
        ck.add_params(name, &self.params);
    }

    pub fn load(ck: &Checkpoint, name: &str) -> Result<Self> {
        let spec: MlpSpec = ck.meta(&format!("{name}.spec"))?.parse()?;
        Self::from_params(spec, ck.require_params(name)?.clone())
    }

    /// A checkpoint holding only these primitives.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::CHECKPOINT_KIND).with_meta("fingerprint", self.fingerprint());
        self.store(&mut ck, "primitives");
        ck
    }

    /// Primitives from a frozen-primitives file or from any checkpoint that
    /// stores a composite policy under `bob`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind == Self::CHECKPOINT_KIND {
            Self::load(ck, "primitives")
        } else {
            Ok(CompositePolicy::load(ck, "bob")?.current_primitives())
        }
    }

    /// SHA-256 over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.params.values() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Multiplicative compositional policy over positions-and-goal observations.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositePolicy {
    pub primitives: Primitives,
    pub gate_spec: MlpSpec,
    /// Primitive layers followed by `gate.` layers.
    params: ParamVector,
    gate_range: Range<usize>,
    freeze_primitives: bool,
}

pub struct CompositeCache {
    n: usize,
    prim_caches: Vec<MlpCache>,
    gate_cache: MlpCache,
    raw: Vec<f64>,
    log_probs: Vec<f64>,
    entropies: Vec<f64>,
}

impl PolicyCache for CompositeCache {
    fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    fn entropies(&self) -> &[f64] {
        &self.entropies
    }
}

impl CompositePolicy {
    pub fn init(k: usize, hidden: &[usize], rng: &mut SimRng) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("need at least one primitive".into()));
        }
        let primitives = Primitives::init(k, hidden, rng)?;
        let gate_spec = MlpSpec::new(View::PositionsAndGoal.dim(), hidden, k, Activation::Tanh)?;
        let gate = gate_spec.init(rng, HEAD_INIT_SCALE);
        Self::assemble(primitives, gate_spec, &gate)
    }

    pub fn assemble(primitives: Primitives, gate_spec: MlpSpec, gate: &ParamVector) -> Result<Self> {
        gate_spec.check_layout(gate)?;
        if gate_spec.output_dim != primitives.k || gate_spec.input_dim != View::PositionsAndGoal.dim() {
            return Err(Error::LayoutMismatch(format!(
                "gate {gate_spec} does not fit {} primitives",
                primitives.k
            )));
        }
        let mut params = primitives.params.clone();
        let gate_range = params.append("gate.", gate);
        Ok(Self {
            primitives,
            gate_spec,
            params,
            gate_range,
            freeze_primitives: false,
        })
    }

    pub fn k(&self) -> usize {
        self.primitives.k
    }

    pub fn store(&self, ck: &mut Checkpoint, name: &str) {
        ck.meta.insert(format!("{name}.prim_spec"), self.primitives.spec.to_string());
        ck.meta.insert(format!("{name}.gate_spec"), self.gate_spec.to_string());
        ck.add_params(name, &self.params);
    }

    pub fn load(ck: &Checkpoint, name: &str) -> Result<Self> {
        let prim_spec: MlpSpec = ck.meta(&format!("{name}.prim_spec"))?.parse()?;
        let gate_spec: MlpSpec = ck.meta(&format!("{name}.gate_spec"))?.parse()?;
        let params = ck.require_params(name)?;
        let prims = params
            .subset("prim")
            .ok_or_else(|| Error::LayoutMismatch(format!("`{name}` holds no primitives")))?;
        let gate = params
            .extract("gate.")
            .ok_or_else(|| Error::LayoutMismatch(format!("`{name}` holds no gate")))?;
        Self::assemble(Primitives::from_params(prim_spec, prims)?, gate_spec, &gate)
    }

    /// Keeps primitive parameters fixed during training.
    pub fn set_freeze_primitives(&mut self, frozen: bool) {
        self.freeze_primitives = frozen;
    }

    /// Primitives with their current parameters.
    pub fn current_primitives(&self) -> Primitives {
        let n = self.primitives.params.len();
        let mut p = self.primitives.clone();
        p.params.values_mut().copy_from_slice(&self.params.values()[..n]);
        p
    }

    pub fn gate_params(&self) -> ParamVector {
        self.params.extract("gate.").expect("gate layers")
    }

    fn prim_slice(&self) -> &[f64] {
        &self.params.values()[..self.gate_range.start]
    }

    fn gate_slice(&self) -> &[f64] {
        &self.params.values()[self.gate_range.clone()]
    }

    fn gate_forward(&self, obs: &[f64], n: usize) -> Result<MlpCache> {
        let x = scale_rows(obs, &input_scale(View::PositionsAndGoal), self.gate_spec.input_dim, n)?;
        self.gate_spec.forward_cached(self.gate_slice(), &x, n)
    }

    pub fn primitive_outputs(&self, obs: &[f64]) -> Result<PrimitiveOutput> {
        self.primitives.outputs_with(self.prim_slice(), obs)
    }

    pub fn gate_output(&self, obs: &[f64]) -> Result<GateOutput> {
        let c = self.gate_forward(obs, 1)?;
        let weights: Vec<f64> = c.output().iter().map(|z| sigmoid(*z).max(GATE_FLOOR)).collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("gate output".into()));
        }
        Ok(GateOutput { weights })
    }

    pub fn distribution(&self, obs: &[f64]) -> Result<CompositeDistribution> {
        compose(&self.primitive_outputs(obs)?, &self.gate_output(obs)?)
    }

    /// Log-density of `action` and its gradient w.r.t. every parameter.
    pub fn log_prob_with_grad(&self, obs: &[f64], action: &[f64]) -> Result<(f64, ParamVector)> {
        let cache = self.evaluate_batch(obs, action, 1)?;
        let mut grad = self.params.zeros_like();
        self.backward_batch(&cache, &[1.0], &[0.0], grad.values_mut())?;
        Ok((cache.log_probs[0], grad))
    }
}

impl Policy for CompositePolicy {
    type Cache = CompositeCache;

    fn obs_dim(&self) -> usize {
        View::PositionsAndGoal.dim()
    }

    fn raw_dim(&self) -> usize {
        self.primitives.action_dim
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn frozen_ranges(&self) -> Vec<Range<usize>> {
        if self.freeze_primitives {
            vec![0..self.gate_range.start]
        } else {
            Vec::new()
        }
    }

    fn sample(&self, obs: &[f64], rng: &mut SimRng) -> Result<PolicySample> {
        let d = self.distribution(obs)?;
        let raw = draw_gaussian(&d.mu, &d.variance, rng);
        let log_prob = d.log_prob(&raw);
        Ok(PolicySample {
            action: clamp_action(&raw),
            raw,
            log_prob,
        })
    }

    fn mean_action(&self, obs: &[f64]) -> Result<Action> {
        Ok(clamp_action(&self.distribution(obs)?.mu))
    }

    fn evaluate_batch(&self, obs: &[f64], raw: &[f64], n: usize) -> Result<CompositeCache> {
        let a = self.primitives.action_dim;
        let k = self.k();
        if raw.len() != n * a {
            return Err(Error::DimensionMismatch {
                layer: "action".into(),
                expected: n * a,
                got: raw.len(),
            });
        }
        let prim_caches = self.primitives.forward_batch(self.prim_slice(), obs, n)?;
        let gate_cache = self.gate_forward(obs, n)?;
        let mut log_probs = Vec::with_capacity(n);
        let mut entropies = Vec::with_capacity(n);
        let mut means = vec![0.0; k * a];
        let mut vars = vec![0.0; k * a];
        let mut weights = vec![0.0; k];
        for b in 0..n {
            for i in 0..k {
                let out = &prim_caches[i].output()[b * 2 * a..(b + 1) * 2 * a];
                means[i * a..(i + 1) * a].copy_from_slice(&out[..a]);
                for j in 0..a {
                    vars[i * a + j] = softplus(out[a + j]) + SIGMA_MIN;
                }
                weights[i] = sigmoid(gate_cache.output()[b * k + i]).max(GATE_FLOOR);
            }
            let (mu, var) = compose_raw(&means, &vars, &weights, a);
            let x = &raw[b * a..(b + 1) * a];
            log_probs.push(gaussian_log_density(&mu, &var, x));
            entropies.push(gaussian_entropy(&var));
        }
        if log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("composite log-probability".into()));
        }
        Ok(CompositeCache {
            n,
            prim_caches,
            gate_cache,
            raw: raw.to_vec(),
            log_probs,
            entropies,
        })
    }

    fn backward_batch(&self, cache: &CompositeCache, dlogp: &[f64], dent: &[f64], grad: &mut [f64]) -> Result<()> {
        let (n, a, k) = (cache.n, self.primitives.action_dim, self.k());
        if dlogp.len() != n || dent.len() != n || grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                layer: "composite backward".into(),
                expected: n,
                got: dlogp.len(),
            });
        }
        let mut prim_grads = vec![vec![0.0; n * 2 * a]; k];
        let mut gate_grad = vec![0.0; n * k];
        let mut p = vec![0.0; k];
        for b in 0..n {
            let mut w = vec![0.0; k];
            let mut s_gate = vec![0.0; k];
            for i in 0..k {
                let s = sigmoid(cache.gate_cache.output()[b * k + i]);
                s_gate[i] = s;
                w[i] = s.max(GATE_FLOOR);
            }
            let mut gw = vec![0.0; k];
            for j in 0..a {
                let mut precision = 0.0;
                let mut weighted = 0.0;
                for i in 0..k {
                    let out = &cache.prim_caches[i].output()[b * 2 * a..];
                    let var = softplus(out[a + j]) + SIGMA_MIN;
                    p[i] = w[i] / var;
                    precision += p[i];
                    weighted += p[i] * out[j];
                }
                let mu = weighted / precision;
                let diff = cache.raw[b * a + j] - mu;
                let g_mu = dlogp[b] * diff * precision;
                let g_prec = dlogp[b] * (-0.5 * diff * diff + 0.5 / precision) - dent[b] * 0.5 / precision;
                for i in 0..k {
                    let out = &cache.prim_caches[i].output()[b * 2 * a..];
                    let raw_var = out[a + j];
                    let var = softplus(raw_var) + SIGMA_MIN;
                    let g_p = g_mu * (out[j] - mu) / precision + g_prec;
                    prim_grads[i][b * 2 * a + j] += g_mu * p[i] / precision;
                    gw[i] += g_p / var;
                    let g_var = -g_p * w[i] / (var * var);
                    prim_grads[i][b * 2 * a + a + j] += g_var * sigmoid(raw_var);
                }
            }
            for i in 0..k {
                if s_gate[i] > GATE_FLOOR {
                    gate_grad[b * k + i] = gw[i] * s_gate[i] * (1.0 - s_gate[i]);
                }
            }
        }
        let np = self.primitives.spec.num_params();
        let prim_params = &self.params.values()[..self.gate_range.start];
        let (prim_buf, gate_buf) = grad.split_at_mut(self.gate_range.start);
        if !self.freeze_primitives {
            for i in 0..k {
                self.primitives.spec.backward_slice(
                    &prim_params[i * np..(i + 1) * np],
                    &cache.prim_caches[i],
                    &prim_grads[i],
                    &mut prim_buf[i * np..(i + 1) * np],
                )?;
            }
        }
        self.gate_spec
            .backward_slice(self.gate_slice(), &cache.gate_cache, &gate_grad, gate_buf)?;
        Ok(())
    }
}

/// How a Gaussian policy's raw sample becomes an environment action.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionDecoder {
    /// The raw sample is the action (clamped).
    Direct,
    /// The raw sample is K gate logits; the action is the mean of the
    /// composition of frozen primitives under `max(sigmoid(logit), floor)`.
    Composite(Primitives),
}

/// Diagonal Gaussian with a single network for the mean and state-independent
/// learned log standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub view: View,
    pub spec: MlpSpec,
    /// Layers `net.*` followed by `log_std`.
    params: ParamVector,
    net_range: Range<usize>,
    decoder: ActionDecoder,
}

pub struct GaussianCache {
    n: usize,
    net_cache: MlpCache,
    raw: Vec<f64>,
    log_probs: Vec<f64>,
    entropies: Vec<f64>,
}

impl PolicyCache for GaussianCache {
    fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    fn entropies(&self) -> &[f64] {
        &self.entropies
    }
}

impl GaussianPolicy {
    pub fn init(view: View, hidden: &[usize], out_dim: usize, decoder: ActionDecoder, rng: &mut SimRng) -> Result<Self> {
        let spec = MlpSpec::new(view.dim(), hidden, out_dim, Activation::Tanh)?;
        let net = spec.init(rng, HEAD_INIT_SCALE);
        let log_std = ParamVector::zeros(vec![crate::nn::LayerShape::new("log_std", vec![out_dim])]);
        Self::assemble(view, spec, &net, &log_std, decoder)
    }

    /// Monolithic action policy.
    pub fn monolithic(view: View, hidden: &[usize], rng: &mut SimRng) -> Result<Self> {
        Self::init(view, hidden, ACTION_DIM, ActionDecoder::Direct, rng)
    }

    /// Gate-only policy over frozen primitives.
    pub fn orchestrator(primitives: Primitives, hidden: &[usize], rng: &mut SimRng) -> Result<Self> {
        let k = primitives.k;
        Self::init(View::PositionsAndGoal, hidden, k, ActionDecoder::Composite(primitives), rng)
    }

    pub fn assemble(
        view: View,
        spec: MlpSpec,
        net: &ParamVector,
        log_std: &ParamVector,
        decoder: ActionDecoder,
    ) -> Result<Self> {
        spec.check_layout(net)?;
        if spec.input_dim != view.dim() || log_std.len() != spec.output_dim {
            return Err(Error::LayoutMismatch(format!("policy {spec} does not match view {view:?}")));
        }
        match &decoder {
            ActionDecoder::Direct if spec.output_dim != ACTION_DIM => {
                return Err(Error::LayoutMismatch("direct policy must output the action dimension".into()))
            }
            ActionDecoder::Composite(p) if spec.output_dim != p.k => {
                return Err(Error::LayoutMismatch("orchestrator must output one logit per primitive".into()))
            }
            _ => {}
        }
        let mut params = ParamVector::zeros(Vec::new());
        let net_range = params.append("net.", net);
        params.append("", log_std);
        Ok(Self {
            view,
            spec,
            params,
            net_range,
            decoder,
        })
    }

    pub fn store(&self, ck: &mut Checkpoint, name: &str) {
        ck.meta.insert(format!("{name}.view"), self.view.name().to_string());
        ck.meta.insert(format!("{name}.spec"), self.spec.to_string());
        ck.add_params(name, &self.params);
        if let ActionDecoder::Composite(p) = &self.decoder {
            p.store(ck, &format!("{name}.primitives"));
        }
    }

    pub fn load(ck: &Checkpoint, name: &str) -> Result<Self> {
        let view = View::parse(ck.meta(&format!("{name}.view"))?)?;
        let spec: MlpSpec = ck.meta(&format!("{name}.spec"))?.parse()?;
        let params = ck.require_params(name)?;
        let net = params
            .extract("net.")
            .ok_or_else(|| Error::LayoutMismatch(format!("`{name}` holds no network")))?;
        let log_std = params
            .subset("log_std")
            .ok_or_else(|| Error::LayoutMismatch(format!("`{name}` holds no log_std")))?;
        let prim_name = format!("{name}.primitives");
        let decoder = if ck.params(&prim_name).is_some() {
            ActionDecoder::Composite(Primitives::load(ck, &prim_name)?)
        } else {
            ActionDecoder::Direct
        };
        Self::assemble(view, spec, &net, &log_std, decoder)
    }

    pub fn decoder(&self) -> &ActionDecoder {
        &self.decoder
    }

    pub fn net_params(&self) -> ParamVector {
        self.params.extract("net.").expect("net layers")
    }

    pub fn log_std_params(&self) -> ParamVector {
        self.params.extract("log_std").expect("log_std")
    }

    fn stds(&self) -> Vec<f64> {
        self.params.values()[self.net_range.end..]
            .iter()
            .map(|l| l.exp().max(SIGMA_MIN))
            .collect()
    }

    /// Mean and standard deviation of the raw-action Gaussian.
    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = scale_rows(obs, &input_scale(self.view), self.spec.input_dim, 1)?;
        let mu = self.spec.forward_slice(&self.params.values()[self.net_range.clone()], &x, 1)?;
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy network output".into()));
        }
        Ok((mu, self.stds()))
    }

    fn decode(&self, obs: &[f64], raw: &[f64]) -> Result<Action> {
        match &self.decoder {
            ActionDecoder::Direct => Ok(clamp_action(raw)),
            ActionDecoder::Composite(prims) => {
                let weights = raw.iter().map(|z| sigmoid(*z).max(GATE_FLOOR)).collect();
                let d = compose(&prims.outputs(obs)?, &GateOutput { weights })?;
                Ok(clamp_action(&d.mu))
            }
        }
    }
}

impl Policy for GaussianPolicy {
    type Cache = GaussianCache;

    fn obs_dim(&self) -> usize {
        self.view.dim()
    }

    fn raw_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn sample(&self, obs: &[f64], rng: &mut SimRng) -> Result<PolicySample> {
        let (mu, std) = self.forward(obs)?;
        let var: Vec<f64> = std.iter().map(|s| s * s).collect();
        let raw = draw_gaussian(&mu, &var, rng);
        let log_prob = gaussian_log_density(&mu, &var, &raw);
        Ok(PolicySample {
            action: self.decode(obs, &raw)?,
            raw,
            log_prob,
        })
    }

    fn mean_action(&self, obs: &[f64]) -> Result<Action> {
        let (mu, _) = self.forward(obs)?;
        self.decode(obs, &mu)
    }

    fn evaluate_batch(&self, obs: &[f64], raw: &[f64], n: usize) -> Result<GaussianCache> {
        let d = self.spec.output_dim;
        if raw.len() != n * d {
            return Err(Error::DimensionMismatch {
                layer: "action".into(),
                expected: n * d,
                got: raw.len(),
            });
        }
        let x = scale_rows(obs, &input_scale(self.view), self.spec.input_dim, n)?;
        let net_cache = self
            .spec
            .forward_cached(&self.params.values()[self.net_range.clone()], &x, n)?;
        let var: Vec<f64> = self.stds().iter().map(|s| s * s).collect();
        let entropy = gaussian_entropy(&var);
        let log_probs: Vec<f64> = (0..n)
            .map(|b| gaussian_log_density(&net_cache.output()[b * d..(b + 1) * d], &var, &raw[b * d..(b + 1) * d]))
            .collect();
        if log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy log-probability".into()));
        }
        Ok(GaussianCache {
            n,
            net_cache,
            raw: raw.to_vec(),
            log_probs,
            entropies: vec![entropy; n],
        })
    }

    fn backward_batch(&self, cache: &GaussianCache, dlogp: &[f64], dent: &[f64], grad: &mut [f64]) -> Result<()> {
        let (n, d) = (cache.n, self.spec.output_dim);
        if dlogp.len() != n || dent.len() != n || grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                layer: "gaussian backward".into(),
                expected: n,
                got: dlogp.len(),
            });
        }
        let log_std = &self.params.values()[self.net_range.end..];
        let stds = self.stds();
        let mut out_grad = vec![0.0; n * d];
        let mut g_log_std = vec![0.0; d];
        for b in 0..n {
            for j in 0..d {
                let var = stds[j] * stds[j];
                let diff = cache.raw[b * d + j] - cache.net_cache.output()[b * d + j];
                out_grad[b * d + j] = dlogp[b] * diff / var;
                // d logp / d log_std = diff^2 / var - 1 ; d H / d log_std = 1
                g_log_std[j] += dlogp[b] * (diff * diff / var - 1.0) + dent[b];
            }
        }
        let (net_buf, std_buf) = grad.split_at_mut(self.net_range.end);
        for j in 0..d {
            if log_std[j].exp() > SIGMA_MIN {
                std_buf[j] += g_log_std[j];
            }
        }
        self.spec.backward_slice(
            &self.params.values()[self.net_range.clone()],
            &cache.net_cache,
            &out_grad,
            net_buf,
        )?;
        Ok(())
    }
}
