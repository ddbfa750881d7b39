//! The LLE-MORL pipeline.
//!
//! 1. Train `K` base policies at evenly spread preference weights.
//! 2. Briefly retrain each base under `d - 1` nearby weights; the parameter
//!    differences are the extension directions.
//! 3. Walk the grid `θ_base + Σ αᵢ Δθᵢ` without training, evaluating each
//!    candidate.
//! 4. Keep the candidates that are non-dominated across all bases.
//! 5. Fine-tune the kept candidates under their matched weights.
//!
//! The total budget is split 3:1:1 over stages 1, 2 and 5.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::momdp::{Environment, PreferenceWeight};
use crate::pareto::{
    dominates, hypervolume, non_dominated_filter, FrontPoint, ParetoArchive, ReferencePoint,
};
use crate::policy::{
    evaluate_returns, flatten, GaussianPolicy, ParameterVector, PolicySpec, ReturnVector,
};
use crate::ppo::{train, IterationRecord, PpoConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LleConfig {
    /// Number of base policies.
    pub k: usize,
    /// Preference shift used for directional retraining.
    pub delta_s: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub delta_alpha: f64,
    /// Grid step that replaces `delta_alpha` with three or more objectives.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_delta_alpha: Option<f64>,
    /// Per-run step overrides; derived from the 3:1:1 split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_init: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_dir: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_ref: Option<u64>,
    /// Episodes per candidate when ranking extension candidates.
    pub eval_episodes_select: usize,
    /// Episodes per policy for everything reported.
    pub eval_episodes_final: usize,
    pub hidden: Vec<usize>,
    /// Supplied by the run configuration rather than the `[lle]` section.
    #[serde(skip)]
    pub seed: u64,
    pub execution: Execution,
}

impl Default for LleConfig {
    fn default() -> Self {
        LleConfig {
            k: 6,
            delta_s: 0.1,
            alpha_start: -1.5,
            alpha_end: 1.5,
            delta_alpha: 0.05,
            coarse_delta_alpha: Some(0.25),
            t_init: None,
            t_dir: None,
            t_ref: None,
            eval_episodes_select: 8,
            eval_episodes_final: 32,
            hidden: vec![64, 64],
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl LleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("lle: {msg}")));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if !(self.delta_s > 0.0 && self.delta_s <= 0.5) {
            return bad(format!("delta_s must lie in (0, 0.5], got {}", self.delta_s));
        }
        if !(self.alpha_start < self.alpha_end) {
            return bad("alpha_start must be below alpha_end".into());
        }
        for step in std::iter::once(self.delta_alpha).chain(self.coarse_delta_alpha) {
            if !(step > 0.0) {
                return bad(format!("alpha step must be positive, got {step}"));
            }
        }
        if self.eval_episodes_select == 0 || self.eval_episodes_final == 0 {
            return bad("evaluation needs at least one episode".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("invalid hidden sizes {:?}", self.hidden));
        }
        Ok(())
    }

    /// Grid step for `d` objectives.
    pub fn alpha_step(&self, d: usize) -> f64 {
        match self.coarse_delta_alpha {
            Some(coarse) if d >= 3 => coarse,
            _ => self.delta_alpha,
        }
    }

    /// The per-direction coefficient grid for `d` objectives.
    pub fn alpha_grid(&self, d: usize) -> Vec<f64> {
        alpha_grid(self.alpha_start, self.alpha_end, self.alpha_step(d))
    }
}

/// `M = ⌊(end - start) / step⌋ + 1` evenly spaced coefficients from `start`.
///
/// Values within `1e-9` of an integer are snapped to it so that the grid hits
/// `0` and `±1` exactly whenever it passes through them.
pub fn alpha_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let m = ((end - start) / step + 1e-9).floor() as usize + 1;
    (0..m)
        .map(|j| {
            let a = start + j as f64 * step;
            let r = a.round();
            if (a - r).abs() < 1e-9 {
                r
            } else {
                a
            }
        })
        .collect()
}

/// All `m`-tuples over `grid`, last coordinate fastest.
pub fn alpha_tuples(grid: &[f64], m: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                grid.iter().map(move |&a| {
                    let mut t = prefix.clone();
                    t.push(a);
                    t
                })
            })
            .collect();
    }
    out
}

/// `K` weights spread evenly over the simplex.
///
/// For `d = 2` these are equal steps from `(1, 0)` to `(0, 1)`. For larger
/// `d` the points of the coarsest simplex lattice with at least `K` points
/// are taken in descending lexicographic order and truncated to `K`.
pub fn make_base_weights(k: usize, d: usize) -> Result<Vec<PreferenceWeight>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 base policies, got {k}")));
    }
    if d < 2 {
        return Err(Error::Config(format!("need at least 2 objectives, got {d}")));
    }
    if d == 2 {
        return (0..k)
            .map(|i| {
                let t = i as f64 / (k - 1) as f64;
                PreferenceWeight::new(vec![1.0 - t, t])
            })
            .collect();
    }
    let mut resolution = 1;
    while lattice_size(resolution, d) < k {
        resolution += 1;
    }
    let mut points = Vec::new();
    lattice(resolution, d, &mut Vec::new(), &mut points);
    points.truncate(k);
    points
        .into_iter()
        .map(|counts| {
            PreferenceWeight::new(
                counts
                    .iter()
                    .map(|&c| c as f64 / resolution as f64)
                    .collect(),
            )
        })
        .collect()
}

fn lattice_size(resolution: usize, d: usize) -> usize {
    // C(resolution + d - 1, d - 1)
    (1..d).fold(1usize, |acc, i| acc * (resolution + i) / i)
}

fn lattice(remaining: usize, d: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == d - 1 {
        prefix.push(remaining);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for c in (0..=remaining).rev() {
        prefix.push(c);
        lattice(remaining - c, d, prefix, out);
        prefix.pop();
    }
}

/// Nearby weight used for directional retraining.
///
/// With two objectives, mass `delta_s` moves from the first objective to the
/// second, or the other way when that would leave `[0, 1]`. With more, mass
/// moves from the largest coordinate to the `direction_index`-th remaining
/// one (1-based) with the same reflection.
pub fn shift_weight(
    w: &PreferenceWeight,
    direction_index: usize,
    delta_s: f64,
) -> Result<PreferenceWeight> {
    let d = w.d();
    if !(delta_s > 0.0 && delta_s < 1.0) {
        return Err(Error::Config(format!("delta_s must lie in (0, 1), got {delta_s}")));
    }
    if direction_index == 0 || direction_index >= d {
        return Err(Error::Config(format!(
            "direction index {direction_index} outside 1..={}",
            d - 1
        )));
    }
    let v = w.as_slice();
    let (from, to) = if d == 2 {
        (0, 1)
    } else {
        let largest = (0..d)
            .max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        let to = (0..d)
            .filter(|&i| i != largest)
            .nth(direction_index - 1)
            .unwrap_or(0);
        (largest, to)
    };
    let mut out = v.to_vec();
    let (a, b) = (v[from] - delta_s, v[to] + delta_s);
    if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
        out[from] = a;
        out[to] = b;
    } else {
        out[from] = v[from] + delta_s;
        out[to] = v[to] - delta_s;
    }
    PreferenceWeight::project(&out)
}


/// Numerical rank test on direction columns: smallest singular value above
/// `1e-8` times the largest, computed from the Gram matrix.
pub fn has_full_column_rank(columns: &[&[f64]]) -> bool {
    use nalgebra::{DMatrix, SymmetricEigen};
    let m = columns.len();
    if m == 0 {
        return false;
    }
    let gram = DMatrix::from_fn(m, m, |i, j| {
        columns[i].iter().zip(columns[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let (lo, hi) = (eig.min().max(0.0), eig.max());
    hi > 0.0 && lo.sqrt() > 1e-8 * hi.sqrt()
}

/// Training log of one PPO run inside the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub label: String,
    pub records: Vec<IterationRecord>,
}

#[derive(Clone, Debug)]
pub struct BasePolicy {
    pub index: usize,
    pub weight: PreferenceWeight,
    pub theta: ParameterVector,
    pub returns: ReturnVector,
}

#[derive(Clone, Debug)]
pub struct DirectionSet {
    pub base_index: usize,
    pub base_theta: ParameterVector,
    pub base_w: PreferenceWeight,
    pub base_returns: ReturnVector,
    pub retrained: Vec<ParameterVector>,
    pub retrained_w: Vec<PreferenceWeight>,
    pub retrained_returns: Vec<ReturnVector>,
    /// `Δθ⁽ⁱ⁾ = θ⁽ⁱ⁾ - θ_base`.
    pub deltas: Vec<ParameterVector>,
    /// `Δw⁽ⁱ⁾ = w⁽ⁱ⁾ - w_base`; each sums to zero.
    pub weight_deltas: Vec<Vec<f64>>,
    /// The direction matrix is numerically rank deficient.
    pub degenerate: bool,
    /// `dominance[i]` is set when the base and retrained policy `i` are not
    /// mutually non-dominated.
    pub dominance: Vec<bool>,
}

impl DirectionSet {
    pub fn m(&self) -> usize {
        self.deltas.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extended,
    FineTuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Extended => "extended",
            Stage::FineTuned => "fine_tuned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub base: usize,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CandidatePolicy {
    pub id: u64,
    pub theta: ParameterVector,
    pub matched_w: PreferenceWeight,
    /// `w_base + Σ αᵢ Δw⁽ⁱ⁾` before clipping to the simplex.
    pub raw_matched_w: Vec<f64>,
    pub returns: Option<ReturnVector>,
    pub origin: Origin,
    pub stage: Stage,
    /// For fine-tuned policies, the id of the extended candidate they came from.
    pub parent: Option<u64>,
}

impl CandidatePolicy {
    fn front_point(&self) -> Option<FrontPoint> {
        self.returns
            .as_ref()
            .map(|r| FrontPoint::new(self.id, r.values.clone()))
    }
}

fn eval_steps<E: Environment + ?Sized>(env: &E, policies: usize, episodes: usize) -> u64 {
    (policies * episodes * env.spec().horizon) as u64
}

/// Stage 2 for one base policy.
#[allow(clippy::too_many_arguments)]
pub fn directional_retrain<E: Environment + ?Sized>(
    base_index: usize,
    base_theta: &ParameterVector,
    base_w: &PreferenceWeight,
    env: &E,
    cfg: &LleConfig,
    ppo: &PpoConfig,
    t_dir: u64,
    eval_seed: u64,
) -> Result<(DirectionSet, Vec<RunLog>, u64)> {
    let m = base_w.d() - 1;
    let base_returns =
        evaluate_returns(base_theta, env, cfg.eval_episodes_final, eval_seed, true)?;
    let mut set = DirectionSet {
        base_index,
        base_theta: base_theta.clone(),
        base_w: base_w.clone(),
        base_returns,
        retrained: Vec::with_capacity(m),
        retrained_w: Vec::with_capacity(m),
        retrained_returns: Vec::with_capacity(m),
        deltas: Vec::with_capacity(m),
        weight_deltas: Vec::with_capacity(m),
        degenerate: false,
        dominance: Vec::with_capacity(m),
    };
    let mut logs = Vec::new();
    let mut steps = 0;
    for i in 1..=m {
        let w = shift_weight(base_w, i, cfg.delta_s)?;
        let seed = derive_seed(cfg.seed, "directional", (base_index * m + i - 1) as u64);
        let out = train(base_theta, env, &w, t_dir, ppo, seed)?;
        steps += out.env_steps;
        logs.push(RunLog {
            label: format!("directional-{base_index}-{i}"),
            records: out.log,
        });
        let returns = evaluate_returns(&out.theta, env, cfg.eval_episodes_final, eval_seed, true)?;
        let a = set.base_returns.as_slice();
        let b = returns.as_slice();
        set.dominance.push(dominates(a, b)? || dominates(b, a)?);
        set.deltas.push(out.theta.sub(base_theta)?);
        set.weight_deltas.push(
            w.as_slice()
                .iter()
                .zip(base_w.as_slice())
                .map(|(x, y)| x - y)
                .collect(),
        );
        set.retrained.push(out.theta);
        set.retrained_w.push(w);
        set.retrained_returns.push(returns);
    }
    let cols: Vec<&[f64]> = set.deltas.iter().map(ParameterVector::data).collect();
    set.degenerate = !has_full_column_rank(&cols);
    Ok((set, logs, steps))
}

/// Unevaluated stage-3 candidates for one direction set, with ids from
/// `first_id` upward.
pub fn extension_candidates(
    dirs: &DirectionSet,
    grid: &[f64],
    first_id: u64,
) -> Result<Vec<CandidatePolicy>> {
    if dirs.degenerate {
        return Err(Error::DegenerateDirections { expected: dirs.m() });
    }
    alpha_tuples(grid, dirs.m())
        .into_iter()
        .enumerate()
        .map(|(j, alpha)| {
            // Exact identities for the base and the retrained endpoints.
            let unit = alpha
                .iter()
                .position(|&a| a == 1.0)
                .filter(|&i| alpha.iter().enumerate().all(|(k, &a)| k == i || a == 0.0));
            let theta = if alpha.iter().all(|&a| a == 0.0) {
                dirs.base_theta.clone()
            } else if let Some(i) = unit {
                dirs.retrained[i].clone()
            } else {
                let mut t = dirs.base_theta.clone();
                for (a, delta) in alpha.iter().zip(&dirs.deltas) {
                    t.axpy(*a, delta)?;
                }
                t
            };
            let mut raw = dirs.base_w.as_slice().to_vec();
            for (a, dw) in alpha.iter().zip(&dirs.weight_deltas) {
                for (r, x) in raw.iter_mut().zip(dw) {
                    *r += a * x;
                }
            }
            Ok(CandidatePolicy {
                id: first_id + j as u64,
                theta,
                matched_w: PreferenceWeight::project(&raw)?,
                raw_matched_w: raw,
                returns: None,
                origin: Origin {
                    base: dirs.base_index,
                    alpha,
                },
                stage: Stage::Extended,
                parent: None,
            })
        })
        .collect()
}

/// Evaluates every candidate in place. Candidates whose evaluation fails keep
/// `returns = None`; their errors are returned by id.
pub fn evaluate_candidates<E: Environment + ?Sized>(
    cands: &mut [CandidatePolicy],
    env: &E,
    episodes: usize,
    seed: u64,
    execution: Execution,
) -> Vec<(u64, Error)> {
    let results = execution.map(cands, |c| evaluate_returns(&c.theta, env, episodes, seed, true));
    let mut failures = Vec::new();
    for (c, r) in cands.iter_mut().zip(results) {
        match r {
            Ok(v) => c.returns = Some(v),
            Err(e) => {
                c.returns = None;
                failures.push((c.id, e));
            }
        }
    }
    failures
}

/// Stage 3: builds and evaluates the candidate grid for one base. No
/// training happens here.
pub fn extend<E: Environment + ?Sized>(
    dirs: &DirectionSet,
    cfg: &LleConfig,
    env: &E,
    eval_seed: u64,
    first_id: u64,
) -> Result<Vec<CandidatePolicy>> {
    let grid = cfg.alpha_grid(dirs.base_w.d());
    let mut cands = extension_candidates(dirs, &grid, first_id)?;
    if let Some((_, e)) = evaluate_candidates(
        &mut cands,
        env,
        cfg.eval_episodes_select,
        eval_seed,
        cfg.execution,
    )
    .into_iter()
    .next()
    {
        return Err(e);
    }
    Ok(cands)
}

/// Stage 4: candidates whose returns no other candidate dominates, pooled
/// over all bases. Unevaluated candidates are ignored.
pub fn select_candidates(cands: &[CandidatePolicy]) -> Result<Vec<CandidatePolicy>> {
    let points: Vec<FrontPoint> = cands.iter().filter_map(CandidatePolicy::front_point).collect();
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let archive = non_dominated_filter(&points)?;
    Ok(cands
        .iter()
        .filter(|c| c.returns.is_some() && archive.contains_id(c.id))
        .cloned()
        .collect())
}

/// Result of stage 5.
#[derive(Clone, Debug)]
pub struct FineTuneOutput {
    pub tuned: Vec<CandidatePolicy>,
    /// Candidates whose training diverged, by parent id.
    pub failures: Vec<(u64, String)>,
    pub logs: Vec<RunLog>,
    pub env_steps: u64,
}

/// Stage 5: trains each candidate for `steps` under its matched weight and
/// re-evaluates it. New ids count up from `first_id`; a failing candidate is
/// reported without stopping the others.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune<E: Environment + ?Sized>(
    selected: &[CandidatePolicy],
    env: &E,
    cfg: &LleConfig,
    ppo: &PpoConfig,
    steps: u64,
    eval_seed: u64,
    first_id: u64,
) -> FineTuneOutput {
    let results = cfg.execution.map_range(selected.len(), |j| {
        let c = &selected[j];
        let seed = derive_seed(cfg.seed, "fine-tune", c.id);
        let out = train(&c.theta, env, &c.matched_w, steps, ppo, seed)?;
        let returns = evaluate_returns(&out.theta, env, cfg.eval_episodes_final, eval_seed, true)?;
        Ok::<_, Error>((
            CandidatePolicy {
                id: first_id + j as u64,
                theta: out.theta,
                matched_w: c.matched_w.clone(),
                raw_matched_w: c.raw_matched_w.clone(),
                returns: Some(returns),
                origin: c.origin.clone(),
                stage: Stage::FineTuned,
                parent: Some(c.id),
            },
            RunLog {
                label: format!("fine-tune-{}", c.id),
                records: out.log,
            },
            out.env_steps,
        ))
    });
    let mut output = FineTuneOutput {
        tuned: Vec::new(),
        failures: Vec::new(),
        logs: Vec::new(),
        env_steps: 0,
    };
    for (c, r) in selected.iter().zip(results) {
        match r {
            Ok((tuned, log, steps)) => {
                output.tuned.push(tuned);
                output.logs.push(log);
                output.env_steps += steps;
            }
            Err(e) => output.failures.push((c.id, e.to_string())),
        }
    }
    output
}

/// Per-run step allocation derived from the total budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total_budget: u64,
    pub init_share: u64,
    pub dir_share: u64,
    pub ref_share: u64,
    pub t_init: u64,
    pub t_dir: u64,
}

/// Splits `total_budget` 3:1:1 and divides the first two shares over their
/// runs. Explicit per-run overrides in `cfg` win.
pub fn plan_budget(total_budget: u64, cfg: &LleConfig, d: usize, batch: usize) -> Result<BudgetPlan> {
    let init_share = total_budget * 3 / 5;
    let dir_share = total_budget / 5;
    let ref_share = total_budget - init_share - dir_share;
    let dir_runs = (cfg.k * (d - 1)) as u64;
    let t_init = cfg.t_init.unwrap_or(init_share / cfg.k as u64);
    let t_dir = cfg.t_dir.unwrap_or(dir_share / dir_runs);
    let batch = batch as u64;
    if t_init < batch {
        return Err(Error::BudgetTooSmall(format!(
            "{t_init} initial steps per base is less than one batch of {batch}"
        )));
    }
    if t_dir > 0 && t_dir < batch {
        return Err(Error::BudgetTooSmall(format!(
            "{t_dir} retraining steps per direction is less than one batch of {batch}"
        )));
    }
    Ok(BudgetPlan {
        total_budget,
        init_share,
        dir_share,
        ref_share,
        t_init,
        t_dir,
    })
}

/// How many of `n` selected candidates to fine-tune and for how long.
///
/// When the share cannot give every candidate a full batch, only
/// `share / batch` candidates are tuned.
pub fn plan_fine_tune(share: u64, n: usize, batch: usize, t_ref: Option<u64>) -> Result<(usize, u64)> {
    let batch = batch as u64;
    if n == 0 {
        return Ok((0, 0));
    }
    if let Some(t) = t_ref {
        if t > 0 && t < batch {
            return Err(Error::BudgetTooSmall(format!(
                "{t} fine-tuning steps is less than one batch of {batch}"
            )));
        }
        return Ok(if t == 0 { (0, 0) } else { (n, t) });
    }
    let per = share / n as u64;
    if per >= batch {
        return Ok((n, per));
    }
    let count = (share / batch) as usize;
    Ok(if count == 0 { (0, 0) } else { (count, share / count as u64) })
}

/// `count` indices spread evenly over `0..n`.
fn spread(n: usize, count: usize) -> Vec<usize> {
    match count {
        0 => Vec::new(),
        1 => vec![n / 2],
        _ if count >= n => (0..n).collect(),
        _ => (0..count)
            .map(|j| (j * (n - 1) + (count - 1) / 2) / (count - 1))
            .collect(),
    }
}

/// Environment steps consumed by each stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub plan: Option<BudgetPlan>,
    pub t_ref: u64,
    pub init_runs: usize,
    pub dir_runs: usize,
    pub ref_runs: usize,
    pub init_steps: u64,
    pub dir_steps: u64,
    pub ref_steps: u64,
    /// Always zero: extension does no training.
    pub extension_train_steps: u64,
    pub extension_eval_steps: u64,
    /// All evaluation steps, extension included.
    pub eval_steps: u64,
    pub fine_tune_subsampled: bool,
}

impl BudgetLedger {
    pub fn train_steps(&self) -> u64 {
        self.init_steps + self.dir_steps + self.extension_train_steps + self.ref_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.train_steps() + self.eval_steps
    }
}

/// Hypervolume after each stage, all against the run's reference point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageHypervolume {
    pub bases: f64,
    pub selected: f64,
    pub final_archive: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub d: usize,
    pub ledger: BudgetLedger,
    pub bases: Vec<BasePolicy>,
    pub directions: Vec<DirectionSet>,
    /// Every extension candidate with its selection-grade returns.
    pub candidates: Vec<CandidatePolicy>,
    /// Selected candidates with final-grade returns.
    pub selected: Vec<CandidatePolicy>,
    pub fine_tuned: Vec<CandidatePolicy>,
    pub archive: ParetoArchive,
    pub reference: ReferencePoint,
    pub stage_hv: StageHypervolume,
    pub logs: Vec<RunLog>,
    pub warnings: Vec<String>,
}

impl PipelineResult {
    pub fn policy(&self, id: u64) -> Option<&CandidatePolicy> {
        self.selected
            .iter()
            .chain(&self.fine_tuned)
            .find(|c| c.id == id)
    }

    /// Archive members in id order.
    pub fn members(&self) -> Vec<&CandidatePolicy> {
        self.archive
            .points()
            .iter()
            .filter_map(|p| self.policy(p.policy_id))
            .collect()
    }

    pub fn base_archive(&self) -> Result<ParetoArchive> {
        let pts: Vec<FrontPoint> = self
            .bases
            .iter()
            .map(|b| FrontPoint::new(b.index as u64, b.returns.values.clone()))
            .collect();
        non_dominated_filter(&pts)
    }
}

/// Runs all five stages on `env` within `total_budget` training steps.
pub fn run_pipeline<E: Environment + ?Sized>(
    env: &E,
    cfg: &LleConfig,
    ppo: &PpoConfig,
    total_budget: u64,
) -> Result<PipelineResult> {
    cfg.validate()?;
    ppo.validate()?;
    let spec_env = env.spec();
    let d = spec_env.d;
    if d < 2 {
        return Err(Error::Config(format!("need at least 2 objectives, got {d}")));
    }
    let m = d - 1;
    let plan = plan_budget(total_budget, cfg, d, ppo.steps_per_batch)?;
    let spec = PolicySpec::actor_critic(spec_env.obs_dim, spec_env.act_dim, &cfg.hidden)?;
    let eval_seed = derive_seed(cfg.seed, "eval", 0);
    let exec = cfg.execution;
    let mut ledger = BudgetLedger {
        plan: Some(plan.clone()),
        ..BudgetLedger::default()
    };
    let mut logs = Vec::new();
    let mut warnings = Vec::new();

    // Stage 1.
    let weights = make_base_weights(cfg.k, d)?;
    let trained = exec.map_range(cfg.k, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init-params", k as u64));
        let theta0 = flatten(&GaussianPolicy::init(&spec, &mut rng));
        let out = train(&theta0, env, &weights[k], plan.t_init, ppo, derive_seed(cfg.seed, "init", k as u64))?;
        let returns = evaluate_returns(&out.theta, env, cfg.eval_episodes_final, eval_seed, true)?;
        Ok::<_, Error>((out, returns))
    });
    let mut bases = Vec::with_capacity(cfg.k);
    for (k, r) in trained.into_iter().enumerate() {
        let (out, returns) = r?;
        ledger.init_runs += 1;
        ledger.init_steps += out.env_steps;
        logs.push(RunLog {
            label: format!("init-{k}"),
            records: out.log,
        });
        bases.push(BasePolicy {
            index: k,
            weight: weights[k].clone(),
            theta: out.theta,
            returns,
        });
    }
    ledger.eval_steps += eval_steps(env, cfg.k, cfg.eval_episodes_final);

    // Stage 2.
    let retrained = exec.map(&bases, |b| {
        directional_retrain(b.index, &b.theta, &b.weight, env, cfg, ppo, plan.t_dir, eval_seed)
    });
    let mut directions = Vec::with_capacity(cfg.k);
    for r in retrained {
        let (set, run_logs, steps) = r?;
        ledger.dir_runs += run_logs.len();
        ledger.dir_steps += steps;
        ledger.eval_steps += eval_steps(env, 1 + m, cfg.eval_episodes_final);
        logs.extend(run_logs);
        for (i, flagged) in set.dominance.iter().enumerate() {
            if *flagged {
                warnings.push(format!(
                    "base {} and its retrained policy {} are not mutually non-dominated",
                    set.base_index,
                    i + 1
                ));
            }
        }
        directions.push(set);
    }

    // Stage 3: pooled over bases, evaluation only.
    let grid = cfg.alpha_grid(d);
    let mut candidates = Vec::new();
    for dirs in &directions {
        let first = candidates.len() as u64;
        if dirs.degenerate {
            warnings.push(format!(
                "directions for base {} are degenerate; only the base itself is a candidate",
                dirs.base_index
            ));
            let cands = extension_candidates(
                &DirectionSet {
                    degenerate: false,
                    ..dirs.clone()
                },
                &[0.0],
                first,
            )?;
            candidates.extend(cands);
        } else {
            candidates.extend(extension_candidates(dirs, &grid, first)?);
        }
    }
    for (id, e) in evaluate_candidates(&mut candidates, env, cfg.eval_episodes_select, eval_seed, exec) {
        warnings.push(format!("candidate {id} could not be evaluated: {e}"));
    }
    ledger.extension_eval_steps = eval_steps(env, candidates.len(), cfg.eval_episodes_select);
    ledger.eval_steps += ledger.extension_eval_steps;

    // Stage 4, then final-grade evaluation of the survivors.
    let mut selected = select_candidates(&candidates)?;
    let regraded = exec.map(&selected, |c| {
        evaluate_returns(&c.theta, env, cfg.eval_episodes_final, eval_seed, true)
    });
    for (c, r) in selected.iter_mut().zip(regraded) {
        c.returns = Some(r?);
    }
    ledger.eval_steps += eval_steps(env, selected.len(), cfg.eval_episodes_final);

    // Stage 5.
    let (count, t_ref) = plan_fine_tune(plan.ref_share, selected.len(), ppo.steps_per_batch, cfg.t_ref)?;
    ledger.t_ref = t_ref;
    let mut fine_tuned = Vec::new();
    if count > 0 {
        let chosen: Vec<CandidatePolicy> = if count < selected.len() {
            ledger.fine_tune_subsampled = true;
            let mut by_first: Vec<&CandidatePolicy> = selected.iter().collect();
            by_first.sort_by(|a, b| {
                let ra = a.returns.as_ref().map_or(0.0, |r| r.values[0]);
                let rb = b.returns.as_ref().map_or(0.0, |r| r.values[0]);
                ra.total_cmp(&rb).then(a.id.cmp(&b.id))
            });
            let mut picked: Vec<CandidatePolicy> = spread(by_first.len(), count)
                .into_iter()
                .map(|i| by_first[i].clone())
                .collect();
            picked.sort_by_key(|c| c.id);
            warnings.push(format!(
                "fine-tuning share covers {count} of {} selected candidates",
                selected.len()
            ));
            picked
        } else {
            selected.clone()
        };
        let out = fine_tune(&chosen, env, cfg, ppo, t_ref, eval_seed, candidates.len() as u64);
        ledger.ref_runs = out.tuned.len() + out.failures.len();
        ledger.ref_steps = out.env_steps;
        ledger.eval_steps += eval_steps(env, out.tuned.len(), cfg.eval_episodes_final);
        for (id, e) in out.failures {
            warnings.push(format!("fine-tuning candidate {id} failed: {e}"));
        }
        logs.extend(out.logs);
        fine_tuned = out.tuned;
    }

    // Final archive and stage hypervolumes on a shared reference point.
    let final_points: Vec<FrontPoint> = selected
        .iter()
        .chain(&fine_tuned)
        .filter_map(CandidatePolicy::front_point)
        .collect();
    if final_points.is_empty() {
        return Err(Error::EmptyArchive);
    }
    let archive = non_dominated_filter(&final_points)?;
    let evaluated = bases
        .iter()
        .map(|b| b.returns.as_slice())
        .chain(directions.iter().flat_map(|s| s.retrained_returns.iter().map(ReturnVector::as_slice)))
        .chain(final_points.iter().map(|p| p.returns.as_slice()));
    let reference = ReferencePoint::below(evaluated, 1.0)?;
    let selected_points: Vec<FrontPoint> =
        selected.iter().filter_map(CandidatePolicy::front_point).collect();
    let mut result = PipelineResult {
        d,
        ledger,
        bases,
        directions,
        candidates,
        selected,
        fine_tuned,
        archive,
        reference,
        stage_hv: StageHypervolume {
            bases: 0.0,
            selected: 0.0,
            final_archive: 0.0,
        },
        logs,
        warnings,
    };
    result.stage_hv = StageHypervolume {
        bases: hypervolume(&result.base_archive()?, &result.reference)?,
        selected: hypervolume(&non_dominated_filter(&selected_points)?, &result.reference)?,
        final_archive: hypervolume(&result.archive, &result.reference)?,
    };
    Ok(result)
}
