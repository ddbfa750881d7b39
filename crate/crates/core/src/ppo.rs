//! Clipped-surrogate PPO over a linearly scalarized reward.
//!
//! Gradients are written out by hand for the tanh-MLP / diagonal-Gaussian
//! family in [`crate::policy`]; the finite-difference tests in this module
//! and in the acceptance suite are the correctness gate for them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::exec::derive_seed;
use crate::momdp::{scalarize, Environment, PreferenceWeight};
use crate::policy::{
    flatten, gaussian_log_prob, unflatten_unchecked, GaussianPolicy, ParameterVector, PolicySpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub steps_per_batch: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub minibatches: usize,
    pub epochs: usize,
    pub clip: f64,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            steps_per_batch: 512,
            learning_rate: 3e-4,
            gamma: 0.995,
            gae_lambda: 0.95,
            minibatches: 32,
            epochs: 10,
            clip: 0.2,
            value_coeff: 0.5,
            entropy_coeff: 0.0,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("ppo: {msg}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.steps_per_batch == 0 {
            return bad("epochs, minibatches and steps_per_batch must be >= 1");
        }
        if self.minibatches > self.steps_per_batch {
            return bad("more minibatches than samples per batch");
        }
        if !(self.learning_rate >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate must be >= 0 and max_grad_norm > 0");
        }
        Ok(())
    }
}

/// Generalized advantage estimation.
///
/// `dones[t]` marks that the episode ended after transition `t`; the value
/// following the last transition is `last_value`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(rewards.len(), values.len())?;
    check_len(rewards.len(), dones.len())?;
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// One batch of on-policy experience with rewards already scalarized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub scalar_rewards: Vec<f64>,
    pub value_estimates: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Fills `advantages` / `returns` and normalizes advantages to zero mean
    /// and unit variance over the batch.
    pub fn finish(&mut self, last_value: f64, gamma: f64, lambda: f64) -> Result<()> {
        let (mut adv, ret) = compute_gae(
            &self.scalar_rewards,
            &self.value_estimates,
            &self.dones,
            last_value,
            gamma,
            lambda,
        )?;
        normalize(&mut adv);
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }
}

fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    xs.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Loss and gradient of the PPO objective on the samples `indices`:
/// `-mean(min(rA, clip(r)A)) + value_coeff * mean((R - V)²) - entropy_coeff * H`.
pub fn policy_loss_and_gradient(
    policy: &GaussianPolicy,
    buffer: &RolloutBuffer,
    indices: &[usize],
    cfg: &PpoConfig,
) -> Result<(LossBreakdown, GaussianPolicy)> {
    let critic = policy
        .critic
        .as_ref()
        .ok_or_else(|| Error::Config("PPO needs a policy with a critic".into()))?;
    let mut grad = GaussianPolicy::zeros(&policy.spec());
    let b = indices.len() as f64;
    let std: Vec<f64> = policy.log_std.iter().map(|s| s.exp()).collect();
    let mut out = LossBreakdown::default();
    let mut clipped = 0usize;
    for &i in indices {
        let obs = &buffer.observations[i];
        let action = &buffer.actions[i];
        let adv = buffer.advantages[i];

        let acts = policy.mean_net.forward_cached(obs);
        let mean = acts.last().unwrap();
        let logp = gaussian_log_prob(mean, &policy.log_std, action);
        let log_ratio = logp - buffer.log_probs[i];
        let ratio = log_ratio.exp();
        let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let surr1 = ratio * adv;
        let surr2 = clipped_ratio * adv;
        out.policy -= surr1.min(surr2) / b;
        out.approx_kl += ((ratio - 1.0) - log_ratio) / b;
        if (ratio - 1.0).abs() > cfg.clip {
            clipped += 1;
        }
        // d(loss)/d(logp); zero when the clipped branch is the minimum
        let dlogp = if surr1 <= surr2 { -adv * ratio / b } else { 0.0 };
        if dlogp != 0.0 {
            let mut dmean = vec![0.0; mean.len()];
            for j in 0..mean.len() {
                let diff = action[j] - mean[j];
                let z = diff / std[j];
                dmean[j] = dlogp * diff / (std[j] * std[j]);
                grad.log_std[j] += dlogp * (z * z - 1.0);
            }
            policy.mean_net.backward(&acts, &dmean, &mut grad.mean_net);
        }

        let cacts = critic.forward_cached(obs);
        let v = cacts.last().unwrap()[0];
        let err = buffer.returns[i] - v;
        out.value += err * err / b;
        let dv = -2.0 * cfg.value_coeff * err / b;
        critic.backward(&cacts, &[dv], grad.critic.as_mut().unwrap());
    }
    out.entropy = policy.entropy();
    for g in &mut grad.log_std {
        *g -= cfg.entropy_coeff;
    }
    out.total = out.policy + cfg.value_coeff * out.value - cfg.entropy_coeff * out.entropy;
    out.clip_fraction = clipped as f64 / b;
    Ok((out, grad))
}

/// [`policy_loss_and_gradient`] on flat parameters.
pub fn loss_and_gradient(
    theta: &ParameterVector,
    buffer: &RolloutBuffer,
    indices: &[usize],
    cfg: &PpoConfig,
) -> Result<(LossBreakdown, ParameterVector)> {
    let spec = PolicySpec::from_layout(theta.layout())?;
    let policy = unflatten_unchecked(theta.data(), &spec);
    let (loss, grad) = policy_loss_and_gradient(&policy, buffer, indices, cfg)?;
    Ok((loss, flatten(&grad)))
}

/// Adam with the epsilon used by common PPO implementations.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, eps: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps,
        }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        grad.iter_mut().for_each(|g| *g *= scale);
    }
}

/// `epochs` passes of shuffled minibatch descent on the PPO loss.
///
/// Returns the updated parameters and the mean loss breakdown over all
/// minibatches; the input is left untouched.
pub fn ppo_update(
    theta: &ParameterVector,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    optimizer: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<(ParameterVector, LossBreakdown)> {
    let spec = PolicySpec::from_layout(theta.layout())?;
    let mut params = theta.clone();
    let n = buffer.len();
    let mb_size = n.div_ceil(cfg.minibatches).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut mean = LossBreakdown::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb_size) {
            let policy = unflatten_unchecked(params.data(), &spec);
            let (loss, grad) = policy_loss_and_gradient(&policy, buffer, chunk, cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite PPO loss {loss:?}"
                )));
            }
            let mut g = flatten(&grad).into_data();
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence("non-finite gradient".into()));
            }
            clip_grad_norm(&mut g, cfg.max_grad_norm);
            optimizer.step(params.data_mut(), &g, cfg.learning_rate);
            mean.total += loss.total;
            mean.policy += loss.policy;
            mean.value += loss.value;
            mean.entropy += loss.entropy;
            mean.clip_fraction += loss.clip_fraction;
            mean.approx_kl += loss.approx_kl;
            count += 1.0;
        }
    }
    if count > 0.0 {
        mean.total /= count;
        mean.policy /= count;
        mean.value /= count;
        mean.entropy /= count;
        mean.clip_fraction /= count;
        mean.approx_kl /= count;
    }
    Ok((params, mean))
}

/// One line of the per-iteration training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub env_steps: u64,
    pub episodes_finished: usize,
    pub mean_scalarized_return: Option<f64>,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub theta: ParameterVector,
    pub env_steps: u64,
    pub log: Vec<IterationRecord>,
}

/// Collects `steps_per_batch` transitions with the current policy, scalarizing
/// rewards with `w`. The environment state carries over between batches.
struct Collector<'a, E: ?Sized> {
    env: &'a E,
    w: &'a PreferenceWeight,
    seed: u64,
    episode: u64,
    state: crate::momdp::EnvState,
    episode_return: f64,
    noise: ChaCha8Rng,
}

impl<'a, E: Environment + ?Sized> Collector<'a, E> {
    fn new(env: &'a E, w: &'a PreferenceWeight, seed: u64) -> Self {
        Collector {
            env,
            w,
            seed,
            episode: 0,
            state: env.reset(derive_seed(seed, "train-reset", 0)),
            episode_return: 0.0,
            noise: ChaCha8Rng::seed_from_u64(derive_seed(seed, "train-noise", 0)),
        }
    }

    fn collect(
        &mut self,
        policy: &GaussianPolicy,
        steps: usize,
        finished: &mut Vec<f64>,
    ) -> Result<(RolloutBuffer, f64)> {
        let mut buf = RolloutBuffer::default();
        for _ in 0..steps {
            let obs = self.state.observation.clone();
            let (action, logp) = policy.act(&obs, &mut self.noise);
            let value = policy.value(&obs).expect("critic checked by caller");
            let (next, r) = self.env.step(&self.state, &action)?;
            let reward = scalarize(&r, self.w)?;
            self.episode_return += reward;
            buf.observations.push(obs);
            buf.actions.push(action);
            buf.log_probs.push(logp);
            buf.scalar_rewards.push(reward);
            buf.value_estimates.push(value);
            buf.dones.push(next.done);
            if next.done {
                finished.push(self.episode_return);
                self.episode_return = 0.0;
                self.episode += 1;
                self.state = self
                    .env
                    .reset(derive_seed(self.seed, "train-reset", self.episode));
            } else {
                self.state = next;
            }
        }
        let last_value = policy.value(&self.state.observation).unwrap();
        Ok((buf, last_value))
    }
}

/// Runs PPO from `theta` under preference `w` for `total_steps` environment
/// interactions (rounded down to whole batches).
pub fn train<E: Environment + ?Sized>(
    theta: &ParameterVector,
    env: &E,
    w: &PreferenceWeight,
    total_steps: u64,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_len(env.spec().d, w.d())?;
    if total_steps == 0 {
        return Ok(TrainOutcome {
            theta: theta.clone(),
            env_steps: 0,
            log: Vec::new(),
        });
    }
    let batch = cfg.steps_per_batch as u64;
    if total_steps < batch {
        return Err(Error::BudgetTooSmall(format!(
            "{total_steps} steps is less than one batch of {batch}"
        )));
    }
    let spec = PolicySpec::from_layout(theta.layout())?;
    if spec.critic.is_none() {
        return Err(Error::Config("PPO needs a policy with a critic".into()));
    }
    check_len(env.spec().obs_dim, spec.obs_dim())?;
    check_len(env.spec().act_dim, spec.act_dim())?;

    let iterations = (total_steps / batch) as usize;
    let mut params = theta.clone();
    let mut optimizer = Adam::new(params.len(), cfg.adam_eps);
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train-shuffle", 0));
    let mut collector = Collector::new(env, w, seed);
    let mut log = Vec::with_capacity(iterations);
    let mut env_steps = 0u64;
    for iteration in 0..iterations {
        let policy = unflatten_unchecked(params.data(), &spec);
        let mut finished = Vec::new();
        let (mut buf, last_value) =
            collector.collect(&policy, cfg.steps_per_batch, &mut finished)?;
        env_steps += batch;
        buf.finish(last_value, cfg.gamma, cfg.gae_lambda)?;
        let (next, loss) = ppo_update(&params, &buf, cfg, &mut optimizer, &mut shuffle)?;
        params = next;
        log.push(IterationRecord {
            iteration,
            env_steps,
            episodes_finished: finished.len(),
            mean_scalarized_return: (!finished.is_empty())
                .then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            loss,
        });
    }
    Ok(TrainOutcome {
        theta: params,
        env_steps,
        log,
    })
}

/// Samples a batch from `theta` without updating it; used by gradient checks.
pub fn collect_batch<E: Environment + ?Sized>(
    theta: &ParameterVector,
    env: &E,
    w: &PreferenceWeight,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<RolloutBuffer> {
    let spec = PolicySpec::from_layout(theta.layout())?;
    let policy = unflatten_unchecked(theta.data(), &spec);
    if policy.critic.is_none() {
        return Err(Error::Config("PPO needs a policy with a critic".into()));
    }
    let mut collector = Collector::new(env, w, seed);
    let mut finished = Vec::new();
    let (mut buf, last) = collector.collect(&policy, cfg.steps_per_batch, &mut finished)?;
    buf.finish(last, cfg.gamma, cfg.gae_lambda)?;
    Ok(buf)
}
