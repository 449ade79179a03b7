//! Dense multilayer perceptrons over flat `f64` parameter vectors, with
//! analytic backpropagation and Adam.
//!
//! Weights of layer `l` are stored row-major as `[out, in]` followed by the
//! `[out]` bias. Batched inputs are row-major `[batch, in]`.

use std::fmt;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Named tensor shape inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayerShape {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl fmt::Display for LayerShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        write!(f, "{}:{}", self.name, dims.join("x"))
    }
}

/// Flat parameter storage with an ordered layout of named shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerShape>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<LayerShape>) -> Self {
        let n = layout.iter().map(LayerShape::numel).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn from_values(layout: Vec<LayerShape>, values: Vec<f64>) -> Result<Self> {
        let n: usize = layout.iter().map(LayerShape::numel).sum();
        if n != values.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout holds {n} elements but {} values were given",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter element {i}")));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Contiguous range covered by every layer whose name starts with `prefix`.
    pub fn range_of(&self, prefix: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        let mut start = None;
        let mut end = 0;
        for l in &self.layout {
            let n = l.numel();
            if l.name.starts_with(prefix) {
                if start.is_none() {
                    start = Some(offset);
                }
                end = offset + n;
            }
            offset += n;
        }
        start.map(|s| s..end)
    }

    /// Appends `other` with every layer name prefixed by `prefix`.
    pub fn append(&mut self, prefix: &str, other: &ParamVector) -> Range<usize> {
        let start = self.values.len();
        self.values.extend_from_slice(&other.values);
        for l in &other.layout {
            self.layout
                .push(LayerShape::new(format!("{prefix}{}", l.name), l.shape.clone()));
        }
        start..self.values.len()
    }

    /// Extracts the layers under `prefix`, stripping the prefix from the names.
    pub fn extract(&self, prefix: &str) -> Option<ParamVector> {
        let range = self.range_of(prefix)?;
        let layout = self
            .layout
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .map(|l| LayerShape::new(&l.name[prefix.len()..], l.shape.clone()))
            .collect();
        Some(ParamVector {
            values: self.values[range].to_vec(),
            layout,
        })
    }

    /// The layers under `prefix`, names kept as they are.
    pub fn subset(&self, prefix: &str) -> Option<ParamVector> {
        let range = self.range_of(prefix)?;
        let layout = self.layout.iter().filter(|l| l.name.starts_with(prefix)).cloned().collect();
        Some(ParamVector {
            values: self.values[range].to_vec(),
            layout,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Shape of a fully connected network; hidden layers share one activation and
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("all layer widths must be positive: {self}")));
        }
        Ok(())
    }

    /// `(in, out)` per affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        self.layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(l, &(i, o))| {
                [
                    LayerShape::new(format!("l{l}.w"), vec![o, i]),
                    LayerShape::new(format!("l{l}.b"), vec![o]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Scaled-uniform initialization: Xavier for tanh, He for relu. The final
    /// layer's weights are multiplied by `final_scale`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, final_scale: f64) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout());
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut off = 0;
        for (l, &(i, o)) in dims.iter().enumerate() {
            let bound = match self.activation {
                Activation::Tanh => (6.0 / (i + o) as f64).sqrt(),
                Activation::Relu => (6.0 / i as f64).sqrt(),
            };
            let scale = if l == last { final_scale } else { 1.0 };
            for v in &mut p.values[off..off + i * o] {
                *v = rng.random_range(-bound..bound) * scale;
            }
            off += i * o + o;
        }
        p
    }

    /// Checks that `params` was produced for this spec.
    pub fn check_layout(&self, params: &ParamVector) -> Result<()> {
        let expected = self.layout();
        if expected.len() != params.layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "spec {self} has {} tensors, parameters have {}",
                expected.len(),
                params.layout.len()
            )));
        }
        for (e, g) in expected.iter().zip(&params.layout) {
            if e != g {
                return Err(Error::LayoutMismatch(format!("expected {e}, found {g}")));
            }
        }
        Ok(())
    }

    fn check_slice(&self, params: &[f64], input: &[f64], batch: usize) -> Result<()> {
        if input.len() != self.input_dim * batch {
            return Err(Error::DimensionMismatch {
                layer: "l0 (input)".into(),
                expected: self.input_dim * batch,
                got: input.len(),
            });
        }
        if params.len() != self.num_params() {
            let mut off = 0;
            for (l, (i, o)) in self.layer_dims().into_iter().enumerate() {
                let need = i * o + o;
                if params.len() < off + need {
                    return Err(Error::DimensionMismatch {
                        layer: format!("l{l}"),
                        expected: need,
                        got: params.len().saturating_sub(off),
                    });
                }
                off += need;
            }
            return Err(Error::DimensionMismatch {
                layer: "trailing".into(),
                expected: self.num_params(),
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Forward pass over a flat slice of parameters.
    pub fn forward_slice(&self, params: &[f64], input: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, input, batch)?.output().to_vec())
    }

    /// Forward pass keeping every layer's output for [`MlpSpec::backward_slice`].
    pub fn forward_cached(&self, params: &[f64], input: &[f64], batch: usize) -> Result<MlpCache> {
        self.check_slice(params, input, batch)?;
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut activations = Vec::with_capacity(dims.len() + 1);
        activations.push(input.to_vec());
        let mut off = 0;
        for (l, &(i, o)) in dims.iter().enumerate() {
            let w = &params[off..off + i * o];
            let b = &params[off + i * o..off + i * o + o];
            off += i * o + o;
            let mut out = vec![0.0; batch * o];
            affine(&activations[l], batch, w, b, i, o, &mut out);
            if l != last {
                let act = self.activation;
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            activations.push(out);
        }
        Ok(MlpCache { activations, batch })
    }

    /// Accumulates `∂(output·output_grad)/∂params` into `param_grad` and
    /// returns the input gradient.
    pub fn backward_slice(
        &self,
        params: &[f64],
        cache: &MlpCache,
        output_grad: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let batch = cache.batch;
        if output_grad.len() != batch * self.output_dim {
            return Err(Error::DimensionMismatch {
                layer: format!("l{} (output)", self.hidden.len()),
                expected: batch * self.output_dim,
                got: output_grad.len(),
            });
        }
        if param_grad.len() != params.len() {
            return Err(Error::DimensionMismatch {
                layer: "gradient buffer".into(),
                expected: params.len(),
                got: param_grad.len(),
            });
        }
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(i, o) in &dims {
            offsets.push(off);
            off += i * o + o;
        }
        let mut delta = output_grad.to_vec();
        for l in (0..dims.len()).rev() {
            let (i, o) = dims[l];
            if l != last {
                let act = self.activation;
                for (d, &y) in delta.iter_mut().zip(&cache.activations[l + 1]) {
                    *d *= act.derivative_from_output(y);
                }
            }
            let off = offsets[l];
            let x = &cache.activations[l];
            let (gw, gb) = param_grad[off..off + i * o + o].split_at_mut(i * o);
            // dW[o, i] += delta^T X
            unsafe {
                matrixmultiply::dgemm(
                    o,
                    batch,
                    i,
                    1.0,
                    delta.as_ptr(),
                    1,
                    o as isize,
                    x.as_ptr(),
                    i as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    i as isize,
                    1,
                );
            }
            for row in delta.chunks_exact(o) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dX[batch, i] = delta W
            let w = &params[off..off + i * o];
            let mut dx = vec![0.0; batch * i];
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    o,
                    i,
                    1.0,
                    delta.as_ptr(),
                    o as isize,
                    1,
                    w.as_ptr(),
                    i as isize,
                    1,
                    0.0,
                    dx.as_mut_ptr(),
                    i as isize,
                    1,
                );
            }
            delta = dx;
        }
        Ok(delta)
    }

    /// Forward pass for a single input against a laid-out parameter vector.
    pub fn forward(&self, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        self.check_layout(params)?;
        self.forward_slice(params.values(), input, 1)
    }

    /// Gradient of `output·output_grad` w.r.t. parameters and input.
    pub fn backward(
        &self,
        params: &ParamVector,
        input: &[f64],
        output_grad: &[f64],
    ) -> Result<(ParamVector, Vec<f64>)> {
        self.check_layout(params)?;
        let cache = self.forward_cached(params.values(), input, 1)?;
        let mut grad = params.zeros_like();
        let dx = self.backward_slice(params.values(), &cache, output_grad, grad.values_mut())?;
        Ok((grad, dx))
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for h in &self.hidden {
            write!(f, "-{h}")?;
        }
        write!(f, "-{} {}", self.output_dim, self.activation.name())
    }
}

impl std::str::FromStr for MlpSpec {
    type Err = Error;

    /// Parses the `Display` form, e.g. `10-64-64-8 tanh`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed network spec `{s}`"));
        let (dims, act) = s.trim().split_once(' ').ok_or_else(bad)?;
        let dims: Vec<usize> = dims
            .split('-')
            .map(|d| d.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if dims.len() < 2 {
            return Err(bad());
        }
        MlpSpec::new(
            dims[0],
            &dims[1..dims.len() - 1],
            dims[dims.len() - 1],
            Activation::parse(act.trim())?,
        )
    }
}

/// Per-layer outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Vec<f64>>,
    batch: usize,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least one layer")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn affine(input: &[f64], batch: usize, w: &[f64], b: &[f64], in_dim: usize, out_dim: usize, out: &mut [f64]) {
    for row in out.chunks_exact_mut(out_dim) {
        row.copy_from_slice(b);
    }
    unsafe {
        matrixmultiply::dgemm(
            batch,
            in_dim,
            out_dim,
            1.0,
            input.as_ptr(),
            in_dim as isize,
            1,
            w.as_ptr(),
            1,
            in_dim as isize,
            1.0,
            out.as_mut_ptr(),
            out_dim as isize,
            1,
        );
    }
}

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(layout: Vec<LayerShape>, lr: f64) -> Result<Self> {
        Self::with_betas(layout, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(layout: Vec<LayerShape>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if lr <= 0.0 || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "invalid Adam hyperparameters lr={lr} beta1={beta1} beta2={beta2}"
            )));
        }
        Ok(Self {
            first_moment: ParamVector::zeros(layout.clone()),
            second_moment: ParamVector::zeros(layout),
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps,
        })
    }

    /// One Adam update. Elements inside `frozen` ranges are left untouched.
    pub fn step_slices(&mut self, params: &mut [f64], grad: &[f64], frozen: &[Range<usize>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grad.len() != params.len() {
            return Err(Error::DimensionMismatch {
                layer: "adam".into(),
                expected: self.first_moment.len(),
                got: grad.len().min(params.len()),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient element {i}")));
        }
        let len = params.len();
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let m = self.first_moment.values_mut();
        let v = self.second_moment.values_mut();
        let mut update = |i: usize| {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        };
        let mut start = 0;
        let mut sorted: Vec<&Range<usize>> = frozen.iter().collect();
        sorted.sort_by_key(|r| r.start);
        for r in sorted {
            (start..r.start.max(start)).for_each(&mut update);
            start = start.max(r.end);
        }
        (start..len).for_each(&mut update);
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if params.layout() != grad.layout() || params.layout() != self.first_moment.layout() {
            return Err(Error::LayoutMismatch("adam: parameter/gradient layouts differ".into()));
        }
        self.step_slices(params.values_mut(), grad.values(), &[])
    }
}

/// Worst relative error between two gradient vectors using the denominator
/// `max(|a|, |b|, 1e-5)`. Central differences with h = 1e-5 carry an absolute
/// error up to about 1e-10, so smaller entries are compared on that scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
        .fold(0.0, f64::max)
}

/// Rescales `grad` in place so its L2 norm does not exceed `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
