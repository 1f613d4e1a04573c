//! Multi-channel feed-forward embedding network.
//!
//! Topology: one dense trunk per input channel, the trunk outputs are
//! concatenated and passed through a fusion stack, then a linear embedding
//! layer (10 nodes by default) and a single sigmoid output node.
//!
//! Gradients are computed analytically; [`gradient_check`] compares them
//! against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Error, Result};

/// Clamp applied to the sigmoid output so that BCE stays finite.
pub const PROBABILITY_EPS: f64 = 1e-7;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const FULL_CHECK_LIMIT: usize = 2000;
const SUBSAMPLED_COORDS: usize = 500;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub channels: Vec<String>,
    pub input_dim_per_channel: usize,
    pub trunk_hidden_dims: Vec<usize>,
    pub fusion_hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: Vec::new(),
            input_dim_per_channel: 0,
            trunk_hidden_dims: vec![16],
            fusion_hidden_dims: vec![32],
            embedding_dim: 10,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(config("network needs at least one channel"));
        }
        if self.input_dim_per_channel == 0 {
            return Err(config("input_dim_per_channel must be at least 1"));
        }
        if self.embedding_dim == 0 {
            return Err(config("embedding_dim must be at least 1"));
        }
        if let Some(pos) = self.trunk_hidden_dims.iter().position(|&d| d == 0) {
            return Err(config(format!("trunk_hidden_dims[{pos}] is zero")));
        }
        if let Some(pos) = self.fusion_hidden_dims.iter().position(|&d| d == 0) {
            return Err(config(format!("fusion_hidden_dims[{pos}] is zero")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &self.channels {
            if !seen.insert(name.as_str()) {
                return Err(config(format!("channel `{name}` listed twice")));
            }
        }
        Ok(())
    }

    /// Length of the flat input vector (all channels concatenated).
    pub fn input_len(&self) -> usize {
        self.channels.len() * self.input_dim_per_channel
    }

    fn trunk_out_dim(&self) -> usize {
        self.trunk_hidden_dims
            .last()
            .copied()
            .unwrap_or(self.input_dim_per_channel)
    }
}

/// Fully connected layer. `weight` is row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
            .collect()
    }

    /// Accumulates `dz ⊗ x` into `grad` and returns `Wᵀ dz`.
    fn backward(&self, grad: &mut Dense, x: &[f64], dz: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &d) in dz.iter().enumerate() {
            grad.bias[o] += d;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += d * x[i];
                dx[i] += row[i] * d;
            }
        }
        dx
    }
}

/// Every trainable tensor of the network. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub trunks: Vec<Vec<Dense>>,
    pub fusion: Vec<Dense>,
    pub embedding: Dense,
    pub output: Dense,
}

impl NetworkParams {
    fn build(cfg: &NetworkConfig, mut make: impl FnMut(usize, usize) -> Dense) -> Self {
        let mut trunks = Vec::with_capacity(cfg.channels.len());
        for _ in &cfg.channels {
            let mut prev = cfg.input_dim_per_channel;
            let mut layers = Vec::new();
            for &h in &cfg.trunk_hidden_dims {
                layers.push(make(prev, h));
                prev = h;
            }
            trunks.push(layers);
        }
        let mut prev = cfg.trunk_out_dim() * cfg.channels.len();
        let mut fusion = Vec::new();
        for &h in &cfg.fusion_hidden_dims {
            fusion.push(make(prev, h));
            prev = h;
        }
        let embedding = make(prev, cfg.embedding_dim);
        let output = make(cfg.embedding_dim, 1);
        Self {
            trunks,
            fusion,
            embedding,
            output,
        }
    }

    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        Self::build(cfg, Dense::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    fn layers(&self) -> Vec<(String, &Dense)> {
        let mut out = Vec::new();
        for (c, trunk) in self.trunks.iter().enumerate() {
            for (l, layer) in trunk.iter().enumerate() {
                out.push((format!("trunk.{c}.{l}"), layer));
            }
        }
        for (l, layer) in self.fusion.iter().enumerate() {
            out.push((format!("fusion.{l}"), layer));
        }
        out.push(("embedding".to_string(), &self.embedding));
        out.push(("output".to_string(), &self.output));
        out
    }

    /// Named tensors in declaration order (weight then bias for each layer).
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, layer)| {
                [
                    (format!("{name}.weight"), layer.weight.as_slice()),
                    (format!("{name}.bias"), layer.bias.as_slice()),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        fn push<'a>(name: String, layer: &'a mut Dense, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
            let Dense { weight, bias, .. } = layer;
            out.push((format!("{name}.weight"), weight));
            out.push((format!("{name}.bias"), bias));
        }
        let mut out = Vec::new();
        for (c, trunk) in self.trunks.iter_mut().enumerate() {
            for (l, layer) in trunk.iter_mut().enumerate() {
                push(format!("trunk.{c}.{l}"), layer, &mut out);
            }
        }
        for (l, layer) in self.fusion.iter_mut().enumerate() {
            push(format!("fusion.{l}"), layer, &mut out);
        }
        push("embedding".to_string(), &mut self.embedding, &mut out);
        push("output".to_string(), &mut self.output, &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    /// Mutable access to the `index`-th coordinate of the flattened parameters.
    pub fn coord_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for (_, t) in self.tensors_mut() {
            if index < t.len() {
                return Some(&mut t[index]);
            }
            index -= t.len();
        }
        None
    }

    /// Name of the `index`-th flattened coordinate, e.g. `fusion.0.weight[3]`.
    pub fn coord_name(&self, mut index: usize) -> Option<String> {
        for (name, t) in self.tensors() {
            if index < t.len() {
                return Some(format!("{name}[{index}]"));
            }
            index -= t.len();
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &NetworkParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.1.len() == y.1.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    trunks: Vec<Vec<LayerCache>>,
    fusion: Vec<LayerCache>,
    embedding_input: Vec<f64>,
    sigmoid: f64,
    clamped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub embedding: Vec<f64>,
    pub probability: f64,
    pub logit: f64,
    pub cache: ForwardCache,
}

/// Upstream derivatives of a per-sample loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Upstream {
    pub d_probability: f64,
    pub d_embedding: Vec<f64>,
}

/// A configured network: its shape contract plus its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: NetworkParams,
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases, deterministic in `config.seed`.
pub fn init_network(config: &NetworkConfig) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = NetworkParams::build(config, |i, o| Dense::random(i, o, &mut rng));
    Ok(Network {
        config: config.clone(),
        params,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Network {
    /// Wraps existing parameters after checking they fit `config`.
    pub fn from_parts(config: NetworkConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        if !NetworkParams::zeros(&config).same_shape(&params) {
            return Err(config_mismatch());
        }
        Ok(Self { config, params })
    }

    pub fn forward(&self, sample: &[f64]) -> Result<ForwardResult> {
        let cfg = &self.config;
        if sample.len() != cfg.input_len() {
            return Err(input(format!(
                "expected {} input values ({} channels x {}), got {}",
                cfg.input_len(),
                cfg.channels.len(),
                cfg.input_dim_per_channel,
                sample.len()
            )));
        }
        if let Some(i) = sample.iter().position(|v| !v.is_finite()) {
            return Err(input(format!("non-finite input value at position {i}")));
        }
        let act = cfg.activation;
        let run_stack = |layers: &[Dense], mut x: Vec<f64>| {
            let mut caches = Vec::with_capacity(layers.len());
            for layer in layers {
                let pre = layer.forward(&x);
                let next = pre.iter().map(|&z| act.apply(z)).collect();
                caches.push(LayerCache { input: x, pre });
                x = next;
            }
            (x, caches)
        };

        let d = cfg.input_dim_per_channel;
        let mut fused = Vec::with_capacity(cfg.trunk_out_dim() * cfg.channels.len());
        let mut trunk_caches = Vec::with_capacity(cfg.channels.len());
        for (c, trunk) in self.params.trunks.iter().enumerate() {
            let (out, caches) = run_stack(trunk, sample[c * d..(c + 1) * d].to_vec());
            fused.extend_from_slice(&out);
            trunk_caches.push(caches);
        }
        let (embedding_input, fusion_caches) = run_stack(&self.params.fusion, fused);
        let embedding = self.params.embedding.forward(&embedding_input);
        let logit = self.params.output.forward(&embedding)[0];
        let s = sigmoid(logit);
        let probability = s.clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS);
        Ok(ForwardResult {
            embedding,
            probability,
            logit,
            cache: ForwardCache {
                trunks: trunk_caches,
                fusion: fusion_caches,
                embedding_input,
                sigmoid: s,
                clamped: probability != s,
            },
        })
    }

    /// Gradient of the summed batch loss with respect to every parameter.
    ///
    /// Samples are accumulated in slice order.
    pub fn backward(&self, batch: &[ForwardResult], upstream: &[Upstream]) -> Result<NetworkParams> {
        if batch.is_empty() {
            return Err(input("backward called with an empty batch"));
        }
        if batch.len() != upstream.len() {
            return Err(input(format!(
                "{} forward results but {} upstream gradients",
                batch.len(),
                upstream.len()
            )));
        }
        let emb_dim = self.config.embedding_dim;
        for (i, u) in upstream.iter().enumerate() {
            if u.d_embedding.len() != emb_dim {
                return Err(input(format!(
                    "upstream embedding gradient {i} has length {}, expected {emb_dim}",
                    u.d_embedding.len()
                )));
            }
            if !u.d_probability.is_finite() || u.d_embedding.iter().any(|v| !v.is_finite()) {
                return Err(input(format!("non-finite upstream gradient for sample {i}")));
            }
        }

        let act = self.config.activation;
        let p = &self.params;
        let mut grad = p.zeros_like();
        let back_stack = |layers: &[Dense], grads: &mut [Dense], caches: &[LayerCache], mut da: Vec<f64>| {
            for ((layer, g), cache) in layers.iter().zip(grads.iter_mut()).zip(caches).rev() {
                let dz: Vec<f64> = da
                    .iter()
                    .zip(&cache.pre)
                    .map(|(d, &z)| d * act.derivative(z))
                    .collect();
                da = layer.backward(g, &cache.input, &dz);
            }
            da
        };

        for (fr, up) in batch.iter().zip(upstream) {
            let cache = &fr.cache;
            let dlogit = if cache.clamped {
                0.0
            } else {
                up.d_probability * cache.sigmoid * (1.0 - cache.sigmoid)
            };
            let mut d_emb = p.output.backward(&mut grad.output, &fr.embedding, &[dlogit]);
            for (d, u) in d_emb.iter_mut().zip(&up.d_embedding) {
                *d += u;
            }
            let d_fused_out = p
                .embedding
                .backward(&mut grad.embedding, &cache.embedding_input, &d_emb);
            let d_fused = back_stack(&p.fusion, &mut grad.fusion, &cache.fusion, d_fused_out);
            let width = self.config.trunk_out_dim();
            for (c, chunk) in d_fused.chunks_exact(width).enumerate() {
                back_stack(&p.trunks[c], &mut grad.trunks[c], &cache.trunks[c], chunk.to_vec());
            }
        }
        Ok(grad)
    }
}

fn config_mismatch() -> Error {
    config("parameter shapes do not match the network configuration")
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam step with decoupled weight decay.
///
/// Parameters are first shrunk by `1 - lr * weight_decay`, then moved by the
/// bias-corrected Adam direction. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if !(weight_decay.is_finite() && weight_decay >= 0.0) {
        return Err(config(format!("weight decay must be finite and >= 0, got {weight_decay}")));
    }
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(config("optimizer state does not match parameter shapes"));
    }
    for (name, t) in grads.tensors() {
        if let Some(i) = t.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {name}[{i}]")));
        }
    }

    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powf(state.t as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(state.t as f64);
    let decay = 1.0 - lr * weight_decay;
    let g_all = grads.tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for ((((_, w), (_, g)), (_, m)), (_, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(g_all)
        .zip(m_all)
        .zip(v_all)
    {
        for i in 0..w.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Max relative error between the analytic gradient returned by `loss` and
/// central differences with step `h`.
///
/// `loss` maps a network to `(loss value, analytic gradient)`. Every
/// coordinate is checked for networks up to 2000 parameters; larger networks
/// are checked on 500 coordinates drawn with the network seed. Relative error
/// is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<F>(network: &Network, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&Network) -> Result<(f64, NetworkParams)>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(input(format!("finite-difference step must be > 0, got {h}")));
    }
    let (_, analytic) = loss(network)?;
    if !analytic.same_shape(&network.params) {
        return Err(config_mismatch());
    }
    let analytic = analytic.to_flat();
    let n = analytic.len();
    let coords: Vec<usize> = if n <= FULL_CHECK_LIMIT {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(network.config.seed ^ 0x6772_6164);
        rand::seq::index::sample(&mut rng, n, SUBSAMPLED_COORDS).into_vec()
    };

    let flat = network.params.to_flat();
    let mut probe = network.clone();
    let mut worst = 0.0f64;
    for idx in coords {
        let orig = flat[idx];
        *probe.params.coord_mut(idx).expect("index in range") = orig + h;
        let (plus, _) = loss(&probe)?;
        *probe.params.coord_mut(idx).expect("index in range") = orig - h;
        let (minus, _) = loss(&probe)?;
        *probe.params.coord_mut(idx).expect("index in range") = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
