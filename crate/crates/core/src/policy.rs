//! Gaussian MLP policies and their flat parameter vectors.
//!
//! A policy is a tanh MLP producing the action mean, a state-independent
//! `log_std` vector, and (optionally) a tanh MLP critic. All three are
//! flattened into one [`ParameterVector`] in a fixed order:
//! actor layers (weight then bias, input to output), `log_std`, critic
//! layers. Weight blocks are row-major with one row per output neuron.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::exec::derive_seed;
use crate::momdp::Environment;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::Config(format!(
                "an MLP needs at least one hidden layer, got sizes {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be >= 1, got {layer_sizes:?}"
            )));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation: Activation::Tanh,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Shapes of the actor, `log_std` and optional critic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub actor: MlpSpec,
    pub critic: Option<MlpSpec>,
}

impl PolicySpec {
    pub fn actor_only(actor: MlpSpec) -> Self {
        PolicySpec {
            actor,
            critic: None,
        }
    }

    /// Actor `[obs, hidden.., act]` and critic `[obs, hidden.., 1]`.
    pub fn actor_critic(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Result<Self> {
        let sizes = |out: usize| {
            let mut s = vec![obs_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        Ok(PolicySpec {
            actor: MlpSpec::new(sizes(act_dim))?,
            critic: Some(MlpSpec::new(sizes(1))?),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let push_net = |net: NetKind, spec: &MlpSpec, blocks: &mut Vec<Block>| {
            for (layer, w) in spec.layer_sizes.windows(2).enumerate() {
                blocks.push(Block {
                    net,
                    layer,
                    kind: BlockKind::Weight,
                    rows: w[1],
                    cols: w[0],
                });
                blocks.push(Block {
                    net,
                    layer,
                    kind: BlockKind::Bias,
                    rows: w[1],
                    cols: 1,
                });
            }
        };
        push_net(NetKind::Actor, &self.actor, &mut blocks);
        blocks.push(Block {
            net: NetKind::LogStd,
            layer: 0,
            kind: BlockKind::LogStd,
            rows: self.act_dim(),
            cols: 1,
        });
        if let Some(critic) = &self.critic {
            push_net(NetKind::Critic, critic, &mut blocks);
        }
        Layout { blocks }
    }

    /// Recovers the network shapes from a layout produced by [`PolicySpec::layout`].
    pub fn from_layout(layout: &Layout) -> Result<Self> {
        let sizes_of = |net: NetKind| -> Result<Option<Vec<usize>>> {
            let weights: Vec<&Block> = layout
                .blocks
                .iter()
                .filter(|b| b.net == net && b.kind == BlockKind::Weight)
                .collect();
            if weights.is_empty() {
                return Ok(None);
            }
            let mut sizes = vec![weights[0].cols];
            for (i, b) in weights.iter().enumerate() {
                if b.layer != i || b.cols != *sizes.last().unwrap() {
                    return Err(Error::LayoutMismatch(format!(
                        "inconsistent {net} layer chain at layer {i}"
                    )));
                }
                sizes.push(b.rows);
            }
            Ok(Some(sizes))
        };
        let actor = sizes_of(NetKind::Actor)?
            .ok_or_else(|| Error::LayoutMismatch("layout has no actor blocks".into()))?;
        let critic = sizes_of(NetKind::Critic)?;
        let spec = PolicySpec {
            actor: MlpSpec::new(actor)?,
            critic: critic.map(MlpSpec::new).transpose()?,
        };
        if spec.layout() != *layout {
            return Err(Error::LayoutMismatch(
                "layout is not in canonical policy order".into(),
            ));
        }
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Actor,
    LogStd,
    Critic,
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetKind::Actor => "actor",
            NetKind::LogStd => "log_std",
            NetKind::Critic => "critic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Weight,
    Bias,
    LogStd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub net: NetKind,
    pub layer: usize,
    pub kind: BlockKind,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> String {
        match self.kind {
            BlockKind::LogStd => "log_std".to_string(),
            BlockKind::Weight => format!("{}.{}.weight", self.net, self.layer),
            BlockKind::Bias => format!("{}.{}.bias", self.net, self.layer),
        }
    }
}

/// Ordered description of how a flat vector splits into blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Blocks paired with their starting offsets.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, &Block)> {
        self.blocks.iter().scan(0usize, |off, b| {
            let start = *off;
            *off += b.len();
            Some((start, b))
        })
    }
}

/// All trainable parameters of a policy as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    data: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn new(data: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        check_len(layout.len(), data.len())?;
        Ok(ParameterVector { data, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParameterVector {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Slice of a single block.
    pub fn block(&self, index: usize) -> &[f64] {
        let (start, b) = self.layout.offsets().nth(index).expect("block index");
        &self.data[start..start + b.len()]
    }

    pub fn check_same_layout(&self, other: &ParameterVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(
                "parameter vectors have different layouts".into(),
            ))
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check_same_layout(other)?;
        Ok(ParameterVector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            layout: self.layout.clone(),
        })
    }

    /// `self + alpha * direction`.
    pub fn add_scaled(&self, alpha: f64, direction: &ParameterVector) -> Result<ParameterVector> {
        let mut out = self.clone();
        out.axpy(alpha, direction)?;
        Ok(out)
    }

    /// In place `self += alpha * direction`.
    pub fn axpy(&mut self, alpha: f64, direction: &ParameterVector) -> Result<()> {
        self.check_same_layout(direction)?;
        for (x, d) in self.data.iter_mut().zip(&direction.data) {
            *x += alpha * d;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParameterVector) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(crate::momdp::dot(&self.data, &other.data))
    }
}

/// One affine layer; `weight` is row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn row(&self, neuron: usize) -> &[f64] {
        &self.weight[neuron * self.inputs..(neuron + 1) * self.inputs]
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.bias
                .iter()
                .enumerate()
                .map(|(i, b)| b + crate::momdp::dot(self.row(i), x)),
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Mlp {
            spec: spec.clone(),
            layers: spec
                .layer_sizes
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        }
    }

    /// Gaussian init with standard deviation `gain / sqrt(fan_in)`; the output
    /// layer uses `output_gain`. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, gain: f64, output_gain: f64, rng: &mut R) -> Self {
        let mut net = Mlp::zeros(spec);
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let g = if i == last { output_gain } else { gain };
            let std = g / (layer.inputs as f64).sqrt();
            for w in &mut layer.weight {
                let z: f64 = StandardNormal.sample(rng);
                *w = std * z;
            }
        }
        net
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Forward pass keeping every layer's output; index 0 is the input.
    pub fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(acts.last().unwrap(), &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    /// Accumulates into `grad` the gradient of a scalar whose derivative with
    /// respect to the network output is `grad_out`.
    pub fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grad: &mut Mlp) {
        let mut delta = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &acts[l];
            let g = &mut grad.layers[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if l == 0 {
                break;
            }
            // propagate through the weights, then through tanh of layer l-1
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(layer.row(o)) {
                    *p += d * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
    }

    fn read_flat(spec: &MlpSpec, data: &[f64], offset: &mut usize) -> Mlp {
        let mut net = Mlp::zeros(spec);
        for layer in &mut net.layers {
            let nw = layer.weight.len();
            layer.weight.copy_from_slice(&data[*offset..*offset + nw]);
            *offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&data[*offset..*offset + nb]);
            *offset += nb;
        }
        net
    }
}

/// Diagonal Gaussian actor with state-independent standard deviation, plus an
/// optional critic that travels in the same parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub mean_net: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Option<Mlp>,
}

impl GaussianPolicy {
    pub fn zeros(spec: &PolicySpec) -> Self {
        GaussianPolicy {
            mean_net: Mlp::zeros(&spec.actor),
            log_std: vec![0.0; spec.act_dim()],
            critic: spec.critic.as_ref().map(Mlp::zeros),
        }
    }

    /// Fresh policy: unit-gain hidden layers, a near-zero mean head, `log_std = 0`.
    pub fn init<R: Rng + ?Sized>(spec: &PolicySpec, rng: &mut R) -> Self {
        GaussianPolicy {
            mean_net: Mlp::init(&spec.actor, 1.0, 0.01, rng),
            log_std: vec![0.0; spec.act_dim()],
            critic: spec.critic.as_ref().map(|c| Mlp::init(c, 1.0, 1.0, rng)),
        }
    }

    pub fn spec(&self) -> PolicySpec {
        PolicySpec {
            actor: self.mean_net.spec.clone(),
            critic: self.critic.as_ref().map(|c| c.spec.clone()),
        }
    }

    pub fn mean(&self, obs: &[f64]) -> Vec<f64> {
        self.mean_net.forward(obs)
    }

    pub fn value(&self, obs: &[f64]) -> Option<f64> {
        self.critic.as_ref().map(|c| c.forward(obs)[0])
    }

    /// Samples an action and returns it with its log density (before any
    /// environment-side clipping).
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let mean = self.mean(obs);
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s.exp() * z
            })
            .collect();
        let lp = gaussian_log_prob(&mean, &self.log_std, &action);
        (action, lp)
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 * (LN_2PI + 1.0)).sum()
    }
}

/// Log density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s.exp();
            -0.5 * z * z - s - 0.5 * LN_2PI
        })
        .sum()
}

/// Packs a policy into a flat vector.
pub fn flatten(policy: &GaussianPolicy) -> ParameterVector {
    let layout = Arc::new(policy.spec().layout());
    let mut data = Vec::with_capacity(layout.len());
    policy.mean_net.write_flat(&mut data);
    data.extend_from_slice(&policy.log_std);
    if let Some(c) = &policy.critic {
        c.write_flat(&mut data);
    }
    ParameterVector { data, layout }
}

/// Inverse of [`flatten`].
pub fn unflatten(theta: &ParameterVector, spec: &PolicySpec) -> Result<GaussianPolicy> {
    if *theta.layout != spec.layout() {
        return Err(Error::LayoutMismatch(
            "parameter layout does not match the policy spec".into(),
        ));
    }
    Ok(unflatten_unchecked(&theta.data, spec))
}

pub(crate) fn unflatten_unchecked(data: &[f64], spec: &PolicySpec) -> GaussianPolicy {
    let mut off = 0;
    let mean_net = Mlp::read_flat(&spec.actor, data, &mut off);
    let act = spec.act_dim();
    let log_std = data[off..off + act].to_vec();
    off += act;
    let critic = spec
        .critic
        .as_ref()
        .map(|c| Mlp::read_flat(c, data, &mut off));
    GaussianPolicy {
        mean_net,
        log_std,
        critic,
    }
}

/// Mean undiscounted return per objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnVector {
    pub values: Vec<f64>,
    pub episodes_averaged: usize,
}

impl ReturnVector {
    pub fn new(values: Vec<f64>) -> Self {
        ReturnVector {
            values,
            episodes_averaged: 1,
        }
    }

    pub fn d(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Runs one episode and returns the undiscounted reward sum per objective.
pub fn rollout_episode<E: Environment + ?Sized>(
    policy: &GaussianPolicy,
    env: &E,
    reset_seed: u64,
    noise: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Vec<f64>> {
    let mut state = env.reset(reset_seed);
    let mut total = vec![0.0; env.spec().d];
    let mut noise = noise;
    while !state.done {
        let action = match noise.as_deref_mut() {
            Some(rng) => policy.act(&state.observation, rng).0,
            None => policy.mean(&state.observation),
        };
        let (next, r) = env.step(&state, &action)?;
        for (t, x) in total.iter_mut().zip(&r.0) {
            *t += x;
        }
        state = next;
    }
    Ok(total)
}

/// Per-episode undiscounted returns for `episodes` rollouts.
///
/// Episode `i` resets with a seed derived from `(seed, i)`, so two policies
/// evaluated with the same seed see the same start states.
pub fn evaluate_episodes<E: Environment + ?Sized>(
    theta: &ParameterVector,
    env: &E,
    episodes: usize,
    seed: u64,
    deterministic: bool,
) -> Result<Vec<Vec<f64>>> {
    use rand::SeedableRng;
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let spec = PolicySpec::from_layout(theta.layout())?;
    check_len(env.spec().obs_dim, spec.obs_dim())?;
    check_len(env.spec().act_dim, spec.act_dim())?;
    let policy = unflatten_unchecked(theta.data(), &spec);
    (0..episodes as u64)
        .map(|i| {
            let reset_seed = derive_seed(seed, "eval-reset", i);
            if deterministic {
                rollout_episode(&policy, env, reset_seed, None)
            } else {
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval-noise", i));
                rollout_episode(&policy, env, reset_seed, Some(&mut rng))
            }
        })
        .collect()
}

/// `V(θ)`: the per-objective mean of undiscounted episodic returns.
pub fn evaluate_returns<E: Environment + ?Sized>(
    theta: &ParameterVector,
    env: &E,
    episodes: usize,
    seed: u64,
    deterministic: bool,
) -> Result<ReturnVector> {
    let per_episode = evaluate_episodes(theta, env, episodes, seed, deterministic)?;
    let d = env.spec().d;
    let mut values = vec![0.0; d];
    for ep in &per_episode {
        for (v, x) in values.iter_mut().zip(ep) {
            *v += x;
        }
    }
    values.iter_mut().for_each(|v| *v /= episodes as f64);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite evaluated return {values:?}"
        )));
    }
    Ok(ReturnVector {
        values,
        episodes_averaged: episodes,
    })
}
