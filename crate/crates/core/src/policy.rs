//! Softmax MLP policies with hand-written gradients.
//!
//! Parameters live in one flat vector: for each layer, first-to-last, the
//! weight matrix (`fan_out x fan_in`, row-major) followed by its bias.
//! Hidden layers use `tanh`; the output layer is linear (logits for
//! policies, a scalar for value functions).

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{Action, Actor, State};
use crate::error::{MorlError, Result};
use crate::persist;

pub const STATE_DIM: usize = 4;
pub const ACTION_COUNT: usize = 2;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self::policy(vec![32, 32])
    }
}

impl MlpArchitecture {
    pub fn policy(hidden_layers: Vec<usize>) -> Self {
        Self {
            input_dim: STATE_DIM,
            hidden_layers,
            activation: Activation::Tanh,
            output_dim: ACTION_COUNT,
        }
    }

    pub fn value(hidden_layers: Vec<usize>) -> Self {
        Self {
            input_dim: STATE_DIM,
            hidden_layers,
            activation: Activation::Tanh,
            output_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(MorlError::InvalidConfig("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in self.hidden_layers.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(MorlError::ParamLength {
                expected,
                actual: params.len(),
            });
        }
        Ok(())
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + alpha * b).collect())
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| alpha * a).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Initialize weights uniformly in `±scale·sqrt(6 / (fan_in + fan_out))`
/// per layer, biases at zero. `scale = 1` is Glorot-uniform.
pub fn init_params(arch: &MlpArchitecture, rng: &mut dyn RngCore, scale: f64) -> ParamVector {
    let mut out = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layer_dims() {
        let bound = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let u: f64 = rng.gen_range(-1.0..=1.0);
            out.push(u * bound);
        }
        out.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector(out)
}

fn layer_views<'a>(arch: &MlpArchitecture, params: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
    let mut offset = 0;
    arch.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w = ArrayView2::from_shape((fan_out, fan_in), &params[offset..offset + fan_in * fan_out])
                .expect("layer shape matches slice");
            offset += fan_in * fan_out;
            let b = ArrayView1::from(&params[offset..offset + fan_out]);
            offset += fan_out;
            (w, b)
        })
        .collect()
}

/// Activations of a batched forward pass, kept for backward and
/// tangent passes.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layers[0]` is the input batch, then each tanh hidden layer.
    layers: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Batched forward pass over rows of `inputs`.
pub fn forward_batch(params: &ParamVector, arch: &MlpArchitecture, inputs: Array2<f64>) -> ForwardCache {
    let views = layer_views(arch, &params.0);
    let (last, hidden) = views.split_last().expect("at least one layer");
    let mut layers = Vec::with_capacity(views.len());
    layers.push(inputs);
    for (w, b) in hidden {
        let mut z = layers.last().expect("input present").dot(&w.t());
        z += b;
        z.mapv_inplace(f64::tanh);
        layers.push(z);
    }
    let mut output = layers.last().expect("input present").dot(&last.0.t());
    output += &last.1;
    ForwardCache { layers, output }
}

/// Gradient of `sum_i d_output[i] · output[i]` with respect to the parameters.
pub fn backward_batch(
    params: &ParamVector,
    arch: &MlpArchitecture,
    cache: &ForwardCache,
    d_output: Array2<f64>,
) -> ParamVector {
    let views = layer_views(arch, &params.0);
    let dims = arch.layer_dims();
    let mut grad = vec![0.0; params.len()];
    let mut offsets = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for (fan_in, fan_out) in &dims {
        offsets.push(offset);
        offset += fan_in * fan_out + fan_out;
    }
    let mut dz = d_output;
    for l in (0..views.len()).rev() {
        let input = &cache.layers[l];
        let (fan_in, fan_out) = dims[l];
        let gw = dz.t().dot(input);
        let gb = dz.sum_axis(Axis(0));
        let o = offsets[l];
        grad[o..o + fan_in * fan_out].copy_from_slice(gw.as_standard_layout().as_slice().expect("contiguous"));
        grad[o + fan_in * fan_out..o + fan_in * fan_out + fan_out].copy_from_slice(gb.as_slice().expect("contiguous"));
        if l > 0 {
            let mut dh = dz.dot(&views[l].0);
            dh.zip_mut_with(input, |d, &h| *d *= 1.0 - h * h);
            dz = dh;
        }
    }
    ParamVector(grad)
}

/// Directional derivative of the outputs along `direction` (forward mode).
pub fn jvp_batch(
    params: &ParamVector,
    arch: &MlpArchitecture,
    cache: &ForwardCache,
    direction: &ParamVector,
) -> Array2<f64> {
    let views = layer_views(arch, &params.0);
    let dviews = layer_views(arch, &direction.0);
    let n = cache.output.nrows();
    let mut dh = Array2::<f64>::zeros((n, arch.input_dim));
    for (l, ((w, _), (dw, db))) in views.iter().zip(&dviews).enumerate() {
        let input = &cache.layers[l];
        let mut dz = input.dot(&dw.t());
        if l > 0 {
            dz += &dh.dot(&w.t());
        }
        dz += db;
        if l + 1 < views.len() {
            dz.zip_mut_with(&cache.layers[l + 1], |d, &h| *d *= 1.0 - h * h);
        }
        dh = dz;
    }
    dh
}

/// Rows of states as a batch matrix.
pub fn states_matrix(states: &[State]) -> Array2<f64> {
    let mut m = Array2::zeros((states.len(), STATE_DIM));
    for (mut row, s) in m.rows_mut().into_iter().zip(states) {
        row.assign(&ArrayView1::from(&s.to_array()));
    }
    m
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Probabilities over the two actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub probs: [f64; ACTION_COUNT],
}

impl ActionDistribution {
    pub fn from_logits(logits: [f64; ACTION_COUNT]) -> Self {
        let max = logits[0].max(logits[1]);
        let e = logits.map(|l| (l - max).exp());
        let sum = e[0] + e[1];
        Self {
            probs: e.map(|v| v / sum),
        }
    }

    /// Highest-probability action; ties go to action 0.
    pub fn greedy(&self) -> Action {
        if self.probs[1] > self.probs[0] {
            Action::Right
        } else {
            Action::Left
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Action {
        let u: f64 = rng.gen();
        if u < self.probs[0] {
            Action::Left
        } else {
            Action::Right
        }
    }
}

/// Output of a single-state forward pass (logits for policies, value for
/// value nets), without touching ndarray.
pub fn forward_single(params: &ParamVector, arch: &MlpArchitecture, state: &State) -> Vec<f64> {
    let mut h: Vec<f64> = state.to_array().to_vec();
    let mut offset = 0;
    let dims = arch.layer_dims();
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params.0[offset..offset + fan_in * fan_out];
        let b = &params.0[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut z: Vec<f64> = (0..fan_out)
            .map(|o| b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(&h).map(|(a, x)| a * x).sum::<f64>())
            .collect();
        if l + 1 < dims.len() {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        h = z;
    }
    h
}

pub fn forward(params: &ParamVector, arch: &MlpArchitecture, state: &State) -> Result<ActionDistribution> {
    if !state.is_finite() {
        return Err(MorlError::NonFiniteState);
    }
    arch.check(params)?;
    let out = forward_single(params, arch, state);
    Ok(ActionDistribution::from_logits([out[0], out[1]]))
}

/// `log π(action | state)` and its gradient.
pub fn log_prob_grad(
    params: &ParamVector,
    arch: &MlpArchitecture,
    state: &State,
    action: Action,
) -> Result<(f64, ParamVector)> {
    if !state.is_finite() {
        return Err(MorlError::NonFiniteState);
    }
    arch.check(params)?;
    let cache = forward_batch(params, arch, states_matrix(std::slice::from_ref(state)));
    let logp = log_softmax_rows(&cache.output);
    let p = logp.mapv(f64::exp);
    let mut d = -p;
    d[[0, action.index()]] += 1.0;
    let grad = backward_batch(params, arch, &cache, d);
    Ok((logp[[0, action.index()]], grad))
}

/// Mean over states of `KL(π_old(·|s) ‖ π_new(·|s))`.
pub fn mean_kl(old: &ParamVector, new: &ParamVector, arch: &MlpArchitecture, states: &Array2<f64>) -> f64 {
    let lo = log_softmax_rows(&forward_batch(old, arch, states.clone()).output);
    let ln = log_softmax_rows(&forward_batch(new, arch, states.clone()).output);
    let total: f64 = lo
        .iter()
        .zip(ln.iter())
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum();
    total / states.nrows() as f64
}

/// Gradient of [`mean_kl`] with respect to the new parameters.
pub fn mean_kl_grad(old: &ParamVector, new: &ParamVector, arch: &MlpArchitecture, states: &Array2<f64>) -> ParamVector {
    let n = states.nrows() as f64;
    let p_old = softmax_rows(&forward_batch(old, arch, states.clone()).output);
    let cache = forward_batch(new, arch, states.clone());
    let p_new = softmax_rows(&cache.output);
    let d = (p_new - p_old) / n;
    backward_batch(new, arch, &cache, d)
}

/// Gauss-Newton (Fisher) product for the mean KL, evaluated at `params`.
/// Reuse the same operator across many vectors via [`FisherOperator`].
pub struct FisherOperator<'a> {
    params: &'a ParamVector,
    arch: &'a MlpArchitecture,
    cache: ForwardCache,
    probs: Array2<f64>,
    damping: f64,
}

impl<'a> FisherOperator<'a> {
    pub fn new(params: &'a ParamVector, arch: &'a MlpArchitecture, states: &Array2<f64>, damping: f64) -> Self {
        let cache = forward_batch(params, arch, states.clone());
        let probs = softmax_rows(&cache.output);
        Self {
            params,
            arch,
            cache,
            probs,
            damping,
        }
    }

    /// `(F + damping·I) v`
    pub fn apply(&self, v: &ParamVector) -> ParamVector {
        let n = self.probs.nrows() as f64;
        let jv = jvp_batch(self.params, self.arch, &self.cache, v);
        // Hessian of the KL in logit space: diag(p) - p pᵀ.
        let mut m = &self.probs * &jv;
        let pu = m.sum_axis(Axis(1));
        for ((mut row, p), s) in m.rows_mut().into_iter().zip(self.probs.rows()).zip(pu.iter()) {
            row.zip_mut_with(&p, |r, &pi| *r -= pi * s);
        }
        m /= n;
        let g = backward_batch(self.params, self.arch, &self.cache, m);
        g.add_scaled(self.damping, v)
    }
}

pub fn kl_and_fvp(
    params_old: &ParamVector,
    params_new: &ParamVector,
    arch: &MlpArchitecture,
    states: &[State],
    v: &ParamVector,
    damping: f64,
) -> (f64, ParamVector) {
    let m = states_matrix(states);
    let kl = mean_kl(params_old, params_new, arch, &m);
    let fvp = FisherOperator::new(params_new, arch, &m, damping).apply(v);
    (kl, fvp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Greedy,
}

pub fn act(params: &ParamVector, arch: &MlpArchitecture, state: &State, mode: ActMode, rng: &mut dyn RngCore) -> Action {
    let out = forward_single(params, arch, state);
    let dist = ActionDistribution::from_logits([out[0], out[1]]);
    match mode {
        ActMode::Greedy => dist.greedy(),
        ActMode::Sample => dist.sample(rng),
    }
}

/// A policy network bundled with its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub arch: MlpArchitecture,
    pub params: ParamVector,
}

impl MlpPolicy {
    pub fn new(arch: MlpArchitecture, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        arch.check(&params)?;
        Ok(Self { arch, params })
    }

    pub fn random(arch: MlpArchitecture, rng: &mut dyn RngCore) -> Self {
        let params = init_params(&arch, rng, 1.0);
        Self { arch, params }
    }

    pub fn distribution(&self, state: &State) -> ActionDistribution {
        let out = forward_single(&self.params, &self.arch, state);
        ActionDistribution::from_logits([out[0], out[1]])
    }

    pub fn greedy(&self) -> GreedyPolicy<'_> {
        GreedyPolicy(self)
    }

    pub fn sampling(&self) -> SamplingPolicy<'_> {
        SamplingPolicy(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            arch: self.arch.clone(),
            params: self.params.clone(),
            format_version: CHECKPOINT_FORMAT_VERSION,
        };
        persist::write_json(path, &doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MorlError::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(text)?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(MorlError::InvalidConfig(format!(
                "unsupported checkpoint format_version {}",
                doc.format_version
            )));
        }
        if !doc.params.is_finite() {
            return Err(MorlError::InvalidConfig("checkpoint has non-finite parameters".into()));
        }
        Self::new(doc.arch, doc.params)
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string_pretty(&Checkpoint {
            arch: self.arch.clone(),
            params: self.params.clone(),
            format_version: CHECKPOINT_FORMAT_VERSION,
        })
        .expect("checkpoint serializes")
    }
}

/// On-disk checkpoint document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub arch: MlpArchitecture,
    pub params: ParamVector,
    pub format_version: u32,
}

pub struct GreedyPolicy<'a>(&'a MlpPolicy);

impl Actor for GreedyPolicy<'_> {
    fn act(&self, state: &State, _rng: &mut dyn RngCore) -> Action {
        self.0.distribution(state).greedy()
    }
}

pub struct SamplingPolicy<'a>(&'a MlpPolicy);

impl Actor for SamplingPolicy<'_> {
    fn act(&self, state: &State, rng: &mut dyn RngCore) -> Action {
        self.0.distribution(state).sample(rng)
    }
}
