//! Vector-reward episodic environments.
//!
//! Two built-in toy control tasks stand in for the usual locomotion
//! benchmarks. Both are deterministic given the reset seed and the action
//! sequence, and both expose two conflicting objectives with a smooth
//! trade-off front.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Simplex membership tolerance for [`PreferenceWeight`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Per-objective instantaneous reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    pub fn zeros(d: usize) -> Self {
        RewardVector(vec![0.0; d])
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
}

/// A point on the probability simplex used for linear scalarization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PreferenceWeight(Vec<f64>);

impl PreferenceWeight {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeight("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeight(format!(
                "component {w} outside [0, inf) in {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidWeight(format!(
                "components sum to {sum}, not 1: {weights:?}"
            )));
        }
        Ok(PreferenceWeight(weights))
    }

    /// Clips componentwise to `[0, 1]` and rescales to sum to one.
    pub fn project(raw: &[f64]) -> Result<Self> {
        let clipped: Vec<f64> = raw.iter().map(|w| w.clamp(0.0, 1.0)).collect();
        let sum: f64 = clipped.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidWeight(format!(
                "cannot project {raw:?} onto the simplex"
            )));
        }
        PreferenceWeight::new(clipped.iter().map(|w| w / sum).collect())
    }

    /// The `i`-th simplex vertex in `d` dimensions.
    pub fn vertex(d: usize, i: usize) -> Self {
        let mut w = vec![0.0; d];
        w[i] = 1.0;
        PreferenceWeight(w)
    }

    pub fn d(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for PreferenceWeight {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        PreferenceWeight::new(v)
    }
}

impl From<PreferenceWeight> for Vec<f64> {
    fn from(w: PreferenceWeight) -> Self {
        w.0
    }
}

/// Linear scalarization `wᵀr`.
pub fn scalarize(r: &RewardVector, w: &PreferenceWeight) -> Result<f64> {
    check_len(w.d(), r.len())?;
    Ok(dot(&r.0, &w.0))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub d: usize,
    pub horizon: usize,
    pub dt: f64,
    pub control_cost_coeff: f64,
    pub friction: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.act_dim == 0 || self.d == 0 || self.horizon == 0 {
            return Err(Error::Config(format!(
                "environment {} needs obs_dim, act_dim, d and horizon >= 1",
                self.name
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// An episodic environment with vector rewards.
///
/// Stepping is a pure function of `(state, action)`; all randomness lives in
/// [`Environment::reset`]. Implementations hold no mutable state, so one
/// instance may be shared by any number of rollout workers.
pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    fn reset(&self, seed: u64) -> EnvState;

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, RewardVector)>;
}

/// Physical parameters shared by the built-in tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Physics {
    pub horizon: usize,
    pub dt: f64,
    pub control_cost_coeff: f64,
    pub friction: f64,
    /// Half-width of the uniform initial-position jitter.
    pub start_jitter: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Physics {
            horizon: 100,
            dt: 0.05,
            control_cost_coeff: 0.05,
            friction: 0.1,
            start_jitter: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinKind {
    /// 2-D point mass; objectives are x- and y-velocity, each minus control cost.
    DualGoal,
    /// 1-D cart; objectives are forward velocity and negative squared effort.
    SpeedEnergy,
}

impl BuiltinKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "dual_goal" | "dualgoal" => Ok(BuiltinKind::DualGoal),
            "speed_energy" | "speedenergy" => Ok(BuiltinKind::SpeedEnergy),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BuiltinKind::DualGoal => "dual_goal",
            BuiltinKind::SpeedEnergy => "speed_energy",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BuiltinEnv {
    kind: BuiltinKind,
    physics: Physics,
    spec: EnvSpec,
}

impl BuiltinEnv {
    pub fn new(kind: BuiltinKind, physics: Physics) -> Result<Self> {
        let (obs_dim, act_dim) = match kind {
            BuiltinKind::DualGoal => (4, 2),
            BuiltinKind::SpeedEnergy => (2, 1),
        };
        let spec = EnvSpec {
            name: kind.name().to_string(),
            obs_dim,
            act_dim,
            d: 2,
            horizon: physics.horizon,
            dt: physics.dt,
            control_cost_coeff: physics.control_cost_coeff,
            friction: physics.friction,
        };
        spec.validate()?;
        Ok(BuiltinEnv { kind, physics, spec })
    }

    pub fn dual_goal() -> Self {
        BuiltinEnv::new(BuiltinKind::DualGoal, Physics::default()).expect("default physics")
    }

    pub fn speed_energy() -> Self {
        BuiltinEnv::new(BuiltinKind::SpeedEnergy, Physics::default()).expect("default physics")
    }

    pub fn by_name(name: &str, physics: Physics) -> Result<Self> {
        BuiltinEnv::new(BuiltinKind::from_name(name)?, physics)
    }

    pub fn kind(&self) -> BuiltinKind {
        self.kind
    }

    pub fn physics(&self) -> &Physics {
        &self.physics
    }
}

/// Projects `a` onto the closed unit ball.
fn project_unit_ball(a: &[f64]) -> Vec<f64> {
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1.0 {
        a.iter().map(|x| x / norm).collect()
    } else {
        a.to_vec()
    }
}

impl Environment for BuiltinEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut observation = vec![0.0; self.spec.obs_dim];
        let jitter = self.physics.start_jitter;
        // Positions are jittered; the body always starts at rest.
        let n_pos = self.spec.obs_dim / 2;
        for x in observation.iter_mut().take(n_pos) {
            *x = if jitter > 0.0 {
                rng.random_range(-jitter..=jitter)
            } else {
                0.0
            };
        }
        EnvState {
            observation,
            step_index: 0,
            done: false,
        }
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, RewardVector)> {
        if state.done {
            return Err(Error::EpisodeDone {
                step: state.step_index,
            });
        }
        check_len(self.spec.act_dim, action.len())?;
        check_len(self.spec.obs_dim, state.observation.len())?;
        let Physics {
            dt,
            friction,
            control_cost_coeff: c,
            ..
        } = self.physics;
        let a: Vec<f64> = match self.kind {
            BuiltinKind::DualGoal => project_unit_ball(action),
            BuiltinKind::SpeedEnergy => action.iter().map(|x| x.clamp(-1.0, 1.0)).collect(),
        };
        let n = self.spec.act_dim;
        let (pos, vel) = state.observation.split_at(n);
        let mut next = vec![0.0; 2 * n];
        for j in 0..n {
            let v = vel[j] + (a[j] - friction * vel[j]) * dt;
            next[n + j] = v;
            next[j] = pos[j] + v * dt;
        }
        let effort: f64 = a.iter().map(|x| x * x).sum();
        let reward = match self.kind {
            BuiltinKind::DualGoal => {
                RewardVector(vec![next[2] - c * effort, next[3] - c * effort])
            }
            BuiltinKind::SpeedEnergy => RewardVector(vec![next[1], -effort]),
        };
        let step_index = state.step_index + 1;
        Ok((
            EnvState {
                observation: next,
                step_index,
                done: step_index >= self.spec.horizon,
            },
            reward,
        ))
    }
}

/// Exposes a subset of another environment's objectives.
///
/// With a single objective this is the plain single-objective task.
#[derive(Clone, Debug)]
pub struct ObjectiveSubset<E> {
    inner: E,
    objectives: Vec<usize>,
    spec: EnvSpec,
}

impl<E: Environment> ObjectiveSubset<E> {
    pub fn new(inner: E, objectives: Vec<usize>) -> Result<Self> {
        let d = inner.spec().d;
        if objectives.is_empty() || objectives.iter().any(|&i| i >= d) {
            return Err(Error::Config(format!(
                "objective subset {objectives:?} invalid for d = {d}"
            )));
        }
        let mut spec = inner.spec().clone();
        spec.name = format!("{}[{objectives:?}]", spec.name);
        spec.d = objectives.len();
        Ok(ObjectiveSubset {
            inner,
            objectives,
            spec,
        })
    }
}

impl<E: Environment> Environment for ObjectiveSubset<E> {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> EnvState {
        self.inner.reset(seed)
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, RewardVector)> {
        let (next, r) = self.inner.step(state, action)?;
        Ok((
            next,
            RewardVector(self.objectives.iter().map(|&i| r.0[i]).collect()),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(v: &[f64]) -> PreferenceWeight {
        PreferenceWeight::new(v.to_vec()).unwrap()
    }

    #[test]
    fn scalarize_examples() {
        let r = RewardVector(vec![2.0, 4.0]);
        assert_eq!(scalarize(&r, &w(&[0.5, 0.5])).unwrap(), 3.0);
        assert_eq!(scalarize(&r, &w(&[1.0, 0.0])).unwrap(), 2.0);
        let r3 = RewardVector(vec![1.0, 2.0, 3.0]);
        assert!((scalarize(&r3, &w(&[0.2, 0.3, 0.5])).unwrap() - 2.3).abs() < 1e-12);
        assert!(matches!(
            scalarize(&r3, &w(&[0.5, 0.5])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn weight_validation() {
        assert!(PreferenceWeight::new(vec![0.3, 0.7]).is_ok());
        assert!(PreferenceWeight::new(vec![0.3, 0.8]).is_err());
        assert!(PreferenceWeight::new(vec![-0.1, 1.1]).is_err());
        assert!(PreferenceWeight::new(vec![]).is_err());
        let p = PreferenceWeight::project(&[1.2, -0.2]).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn reset_is_seeded() {
        let env = BuiltinEnv::dual_goal();
        assert_eq!(env.reset(7), env.reset(7));
        assert_ne!(env.reset(7).observation, env.reset(8).observation);
        let s = BuiltinEnv::speed_energy().reset(0);
        assert_eq!(s.observation.len(), 2);
        assert_eq!(s.step_index, 0);
        assert!(!s.done);
    }

    #[test]
    fn zero_action_from_rest_is_free() {
        let env = BuiltinEnv::dual_goal();
        let s = env.reset(3);
        let (_, r) = env.step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(r.0, vec![0.0, 0.0]);
    }

    #[test]
    fn dual_goal_single_step_by_hand() {
        let physics = Physics {
            friction: 0.0,
            ..Physics::default()
        };
        let env = BuiltinEnv::new(BuiltinKind::DualGoal, physics).unwrap();
        let c = physics.control_cost_coeff;
        let (_, r) = env.step(&env.reset(1), &[1.0, 0.0]).unwrap();
        assert!((r.0[0] - (0.05 * 1.0 - c)).abs() < 1e-15);
        assert!((r.0[1] - (-c)).abs() < 1e-15);
    }

    #[test]
    fn speed_energy_effort_term() {
        let env = BuiltinEnv::speed_energy();
        let (_, r) = env.step(&env.reset(0), &[1.0]).unwrap();
        assert_eq!(r.0[1], -1.0);
        // clipped, not rejected
        let (_, r) = env.step(&env.reset(0), &[3.0]).unwrap();
        assert_eq!(r.0[1], -1.0);
    }

    #[test]
    fn dual_goal_projects_onto_disk() {
        let env = BuiltinEnv::dual_goal();
        let (_, r) = env.step(&env.reset(0), &[5.0, 5.0]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = 0.05 * h - 0.05;
        assert!((r.0[0] - expected).abs() < 1e-12);
        assert!((r.0[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn episode_ends_at_horizon_and_rejects_further_steps() {
        let env = BuiltinEnv::speed_energy();
        let mut s = env.reset(0);
        for t in 0..env.spec().horizon {
            assert!(!s.done, "done early at {t}");
            s = env.step(&s, &[0.5]).unwrap().0;
        }
        assert!(s.done);
        assert_eq!(s.step_index, env.spec().horizon);
        assert!(matches!(
            env.step(&s, &[0.0]),
            Err(Error::EpisodeDone { .. })
        ));
    }

    #[test]
    fn wrong_action_length_is_rejected() {
        let env = BuiltinEnv::dual_goal();
        assert!(env.step(&env.reset(0), &[1.0]).is_err());
    }

    #[test]
    fn single_objective_subset_matches_scalarized_vertex() {
        let env = BuiltinEnv::dual_goal();
        let sub = ObjectiveSubset::new(env.clone(), vec![0]).unwrap();
        assert_eq!(sub.spec().d, 1);
        let mut a = env.reset(5);
        let mut b = sub.reset(5);
        let w2 = w(&[1.0, 0.0]);
        let w1 = w(&[1.0]);
        for t in 0..20 {
            let act = [(t as f64 * 0.3).sin(), (t as f64 * 0.7).cos()];
            let (na, ra) = env.step(&a, &act).unwrap();
            let (nb, rb) = sub.step(&b, &act).unwrap();
            assert_eq!(na, nb);
            assert_eq!(scalarize(&ra, &w2).unwrap(), scalarize(&rb, &w1).unwrap());
            a = na;
            b = nb;
        }
    }

    proptest! {
        #[test]
        fn scalarize_is_linear(
            r1 in prop::collection::vec(-10.0f64..10.0, 3),
            r2 in prop::collection::vec(-10.0f64..10.0, 3),
            raw in prop::collection::vec(0.01f64..1.0, 3),
            alpha in -5.0f64..5.0,
            beta in -5.0f64..5.0,
        ) {
            let s: f64 = raw.iter().sum();
            let w = PreferenceWeight::project(&raw.iter().map(|x| x / s).collect::<Vec<_>>()).unwrap();
            let combo = RewardVector(r1.iter().zip(&r2).map(|(a, b)| alpha * a + beta * b).collect());
            let lhs = scalarize(&combo, &w).unwrap();
            let rhs = alpha * scalarize(&RewardVector(r1.clone()), &w).unwrap()
                + beta * scalarize(&RewardVector(r2.clone()), &w).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn same_seed_same_trajectory(seed in any::<u64>(), acts in prop::collection::vec(-2.0f64..2.0, 40)) {
            let env = BuiltinEnv::dual_goal();
            let run = || {
                let mut s = env.reset(seed);
                let mut out = Vec::new();
                for pair in acts.chunks(2) {
                    let (n, r) = env.step(&s, pair).unwrap();
                    out.push((n.clone(), r));
                    s = n;
                }
                out
            };
            prop_assert_eq!(run(), run());
        }
    }
}
