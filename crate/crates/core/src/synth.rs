//! Closed-form quadratic objective families with a known Pareto set.
//!
//! Objective `i` is `V_i(θ) = -(θ - c_i)ᵀ A_i (θ - c_i)`. For a weight `w`
//! the scalarized optimum is `(Σ w_i A_i)⁻¹ Σ w_i A_i c_i`, so with two
//! objectives the whole Pareto set is the curve `t ↦ θ*(1 - t, t)`. This
//! makes it possible to measure how far a linearly extrapolated parameter
//! lands from the true front without any reinforcement learning.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::exec::derive_seed;
use crate::lle::{has_full_column_rank, shift_weight};
use crate::momdp::PreferenceWeight;
use crate::policy::ReturnVector;

/// Number of points used to discretize the analytic front.
pub const FRONT_RESOLUTION: usize = 100_000;
/// Window of `‖α‖` over which the log-log slope is fitted.
pub const SLOPE_WINDOW: (f64, f64) = (0.05, 0.5);
pub const FLAT_TOLERANCE: f64 = 1e-4;
pub const SLOPE_RANGE: (f64, f64) = (1.7, 2.3);

#[derive(Clone, Debug)]
pub struct QuadraticObjectiveFamily {
    centers: Vec<DVector<f64>>,
    curvatures: Vec<DMatrix<f64>>,
}

impl QuadraticObjectiveFamily {
    /// `curvatures[i]` is a row-major `n × n` matrix.
    pub fn new(centers: Vec<Vec<f64>>, curvatures: Vec<Vec<f64>>) -> Result<Self> {
        if centers.is_empty() || centers.len() != curvatures.len() {
            return Err(Error::Config(format!(
                "{} centers and {} curvatures",
                centers.len(),
                curvatures.len()
            )));
        }
        let n = centers[0].len();
        if n == 0 {
            return Err(Error::Config("parameter dimension is zero".into()));
        }
        let mut cs = Vec::new();
        let mut mats = Vec::new();
        for (c, a) in centers.into_iter().zip(curvatures) {
            check_len(n, c.len())?;
            check_len(n * n, a.len())?;
            let m = DMatrix::from_row_slice(n, n, &a);
            if (&m - m.transpose()).amax() > 1e-12 {
                return Err(Error::Config("curvature matrix is not symmetric".into()));
            }
            let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
            if !(min_eig > 0.0) {
                return Err(Error::Config(format!(
                    "curvature matrix is not positive definite (min eigenvalue {min_eig})"
                )));
            }
            cs.push(DVector::from_vec(c));
            mats.push(m);
        }
        Ok(QuadraticObjectiveFamily {
            centers: cs,
            curvatures: mats,
        })
    }

    /// All curvatures equal to the identity.
    pub fn isotropic(centers: Vec<Vec<f64>>) -> Result<Self> {
        let n = centers.first().map_or(0, Vec::len);
        let a: Vec<f64> = (0..n * n)
            .map(|k| if k / n == k % n { 1.0 } else { 0.0 })
            .collect();
        let curv = vec![a; centers.len()];
        Self::new(centers, curv)
    }

    /// Parameter dimension.
    pub fn n(&self) -> usize {
        self.centers[0].len()
    }

    /// Number of objectives.
    pub fn d(&self) -> usize {
        self.centers.len()
    }

    pub fn center(&self, i: usize) -> &[f64] {
        self.centers[i].as_slice()
    }

    pub fn value(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), theta.len())?;
        let t = DVector::from_column_slice(theta);
        Ok(self.value_vec(&t))
    }

    fn value_vec(&self, theta: &DVector<f64>) -> Vec<f64> {
        self.centers
            .iter()
            .zip(&self.curvatures)
            .map(|(c, a)| {
                let diff = theta - c;
                -(diff.transpose() * a * &diff)[(0, 0)]
            })
            .collect()
    }

    /// Gradient of the scalarized objective `w · V` at `theta`.
    pub fn scalarized_gradient(&self, w: &PreferenceWeight, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.d(), w.d())?;
        check_len(self.n(), theta.len())?;
        let t = DVector::from_column_slice(theta);
        let mut g = DVector::zeros(self.n());
        for ((c, a), wi) in self.centers.iter().zip(&self.curvatures).zip(w.as_slice()) {
            g -= a * (&t - c) * (2.0 * wi);
        }
        Ok(g.as_slice().to_vec())
    }

    /// Maximizer of `w · V`.
    pub fn optimum(&self, w: &PreferenceWeight) -> Result<Vec<f64>> {
        check_len(self.d(), w.d())?;
        Ok(self.optimum_vec(w.as_slice()).as_slice().to_vec())
    }

    fn optimum_vec(&self, w: &[f64]) -> DVector<f64> {
        let n = self.n();
        let mut h = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for ((c, a), wi) in self.centers.iter().zip(&self.curvatures).zip(w) {
            h += a * *wi;
            rhs += a * c * *wi;
        }
        // Positive weights on positive definite matrices keep `h` invertible.
        h.cholesky()
            .map(|ch| ch.solve(&rhs))
            .unwrap_or_else(|| DVector::from_element(n, f64::NAN))
    }
}

/// `V(θ + Δθ) - V(θ)`.
pub fn ppr_delta(
    fam: &QuadraticObjectiveFamily,
    theta: &[f64],
    dtheta: &[f64],
) -> Result<ReturnVector> {
    check_len(theta.len(), dtheta.len())?;
    let moved: Vec<f64> = theta.iter().zip(dtheta).map(|(a, b)| a + b).collect();
    let after = fam.value(&moved)?;
    let before = fam.value(theta)?;
    Ok(ReturnVector::new(
        after.iter().zip(&before).map(|(a, b)| a - b).collect(),
    ))
}

fn sample_ball(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DVector<f64> {
    let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    let norm = dir.norm();
    if norm > 0.0 {
        dir * (r / norm)
    } else {
        dir
    }
}

fn probe_with(
    fam: &QuadraticObjectiveFamily,
    radius: f64,
    n_samples: usize,
    seed: u64,
    measure: impl Fn(&[f64]) -> f64,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {n_samples}")));
    }
    if !(radius >= 0.0) {
        return Err(Error::Config(format!("negative radius {radius}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lipschitz", 0));
    let mut best = 0.0f64;
    for _ in 0..n_samples {
        let a = sample_ball(&mut rng, fam.n(), radius);
        let b = sample_ball(&mut rng, fam.n(), radius);
        let gap = (&a - &b).norm();
        if gap == 0.0 {
            continue;
        }
        let diff: Vec<f64> = fam
            .value_vec(&a)
            .iter()
            .zip(fam.value_vec(&b))
            .map(|(x, y)| x - y)
            .collect();
        best = best.max(measure(&diff) / gap);
    }
    Ok(best)
}

/// Largest observed `‖V(θ₁) - V(θ₂)‖ / ‖θ₁ - θ₂‖` over random pairs in the
/// ball of radius `radius` around the origin.
pub fn lipschitz_probe(
    fam: &QuadraticObjectiveFamily,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    probe_with(fam, radius, n_samples, seed, |d| {
        d.iter().map(|x| x * x).sum::<f64>().sqrt()
    })
}

/// Same as [`lipschitz_probe`] for the scalar `u · V`.
pub fn lipschitz_probe_along(
    fam: &QuadraticObjectiveFamily,
    u: &[f64],
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    check_len(fam.d(), u.len())?;
    probe_with(fam, radius, n_samples, seed, |d| {
        d.iter().zip(u).map(|(x, y)| x * y).sum::<f64>().abs()
    })
}

/// The two-objective front sampled along its Pareto-set parameterization.
#[derive(Clone, Debug)]
pub struct DiscreteFront {
    fam: QuadraticObjectiveFamily,
    ts: Vec<f64>,
    points: Vec<[f64; 2]>,
}

impl DiscreteFront {
    pub fn new(fam: &QuadraticObjectiveFamily, resolution: usize) -> Result<Self> {
        if fam.d() != 2 {
            return Err(Error::Unsupported(format!(
                "analytic front needs 2 objectives, family has {}",
                fam.d()
            )));
        }
        let resolution = resolution.max(2);
        let ts: Vec<f64> = (0..resolution)
            .map(|i| i as f64 / (resolution - 1) as f64)
            .collect();
        let points = ts.iter().map(|&t| Self::eval(fam, t)).collect();
        Ok(DiscreteFront {
            fam: fam.clone(),
            ts,
            points,
        })
    }

    fn eval(fam: &QuadraticObjectiveFamily, t: f64) -> [f64; 2] {
        let v = fam.value_vec(&fam.optimum_vec(&[1.0 - t, t]));
        [v[0], v[1]]
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Pareto-set parameter for position `t ∈ [0, 1]` along the front.
    pub fn pareto_theta(&self, t: f64) -> Vec<f64> {
        self.fam.optimum_vec(&[1.0 - t, t]).as_slice().to_vec()
    }

    /// Euclidean distance from `p` to the front, refined between the grid
    /// neighbours of the closest sample.
    pub fn distance(&self, p: &[f64]) -> f64 {
        let sq = |q: &[f64; 2]| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        let (best, _) = self
            .points
            .iter()
            .enumerate()
            .map(|(i, q)| (i, sq(q)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        let lo = self.ts[best.saturating_sub(1)];
        let hi = self.ts[(best + 1).min(self.ts.len() - 1)];
        let f = |t: f64| sq(&Self::eval(&self.fam, t));
        let (mut a, mut b) = (lo, hi);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..80 {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = f(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = f(x2);
            }
        }
        let refined = f1.min(f2).min(sq(&self.points[best]));
        refined.max(0.0).sqrt()
    }
}

/// Parameter directions paired with their weight differences.
pub type Directions = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// One exact gradient step (step size `eta`) of the scalarized objective at
/// each shifted weight, starting from the optimum for `w`. Returns the
/// parameter directions and matching weight differences.
pub fn gradient_step_directions(
    fam: &QuadraticObjectiveFamily,
    w: &PreferenceWeight,
    delta_s: f64,
    eta: f64,
) -> Result<Directions> {
    let base = fam.optimum(w)?;
    let mut dirs = Vec::new();
    let mut dws = Vec::new();
    for i in 1..fam.d() {
        let shifted = shift_weight(w, i, delta_s)?;
        let g = fam.scalarized_gradient(&shifted, &base)?;
        dirs.push(g.iter().map(|x| eta * x).collect());
        dws.push(
            shifted
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a - b)
                .collect(),
        );
    }
    Ok((dirs, dws))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub alpha: Vec<f64>,
    pub alpha_norm: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    /// Sorted by strictly increasing `alpha_norm`.
    pub samples: Vec<ErrorSample>,
    /// Least-squares slope of `ln distance` against `ln ‖α‖` over the fit
    /// window; `None` when fewer than two usable samples fall inside it.
    pub slope: Option<f64>,
    pub fit_window: (f64, f64),
}

impl ErrorCurve {
    pub fn max_distance(&self) -> f64 {
        self.samples.iter().map(|s| s.distance).fold(0.0, f64::max)
    }
}

fn fit_slope(samples: &[ErrorSample], window: (f64, f64)) -> Option<f64> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.alpha_norm >= window.0 && s.alpha_norm <= window.1 && s.distance > 0.0)
        .map(|s| (s.alpha_norm.ln(), s.distance.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Distance from `V(base + Σ αᵢ Dᵢ)` to the analytic front for each `α`.
pub fn lle_error_curve(
    fam: &QuadraticObjectiveFamily,
    base_theta: &[f64],
    directions: &[Vec<f64>],
    alphas: &[Vec<f64>],
) -> Result<ErrorCurve> {
    check_len(fam.n(), base_theta.len())?;
    let m = fam.d().saturating_sub(1);
    check_len(m, directions.len())?;
    for dir in directions {
        check_len(fam.n(), dir.len())?;
    }
    let cols: Vec<&[f64]> = directions.iter().map(Vec::as_slice).collect();
    if !has_full_column_rank(&cols) {
        return Err(Error::DegenerateDirections { expected: m });
    }
    let front = DiscreteFront::new(fam, FRONT_RESOLUTION)?;
    let tol = 1e-6;
    let base_dist = front.distance(&fam.value(base_theta)?);
    if base_dist > tol {
        return Err(Error::Config(format!(
            "base parameter is {base_dist:e} away from the front"
        )));
    }
    let mut samples = alphas
        .iter()
        .map(|alpha| {
            check_len(m, alpha.len())?;
            let mut theta = base_theta.to_vec();
            for (a, dir) in alpha.iter().zip(directions) {
                for (t, d) in theta.iter_mut().zip(dir) {
                    *t += a * d;
                }
            }
            Ok(ErrorSample {
                alpha: alpha.clone(),
                alpha_norm: alpha.iter().map(|a| a * a).sum::<f64>().sqrt(),
                distance: front.distance(&fam.value(&theta)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    samples.sort_by(|a, b| a.alpha_norm.total_cmp(&b.alpha_norm));
    if samples.windows(2).any(|p| p[0].alpha_norm >= p[1].alpha_norm) {
        return Err(Error::Config("alpha norms must be distinct".into()));
    }
    Ok(ErrorCurve {
        slope: fit_slope(&samples, SLOPE_WINDOW),
        samples,
        fit_window: SLOPE_WINDOW,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthPreset {
    /// Identity curvatures; the Pareto set is a straight segment.
    Flat,
    /// Distinct curvatures; the Pareto set bends in parameter space.
    Curved,
}

impl SynthPreset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "flat" => Ok(SynthPreset::Flat),
            "curved" => Ok(SynthPreset::Curved),
            other => Err(Error::Config(format!(
                "unknown synth preset {other:?} (expected flat or curved)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthPreset::Flat => "flat",
            SynthPreset::Curved => "curved",
        }
    }

    pub fn family(self) -> QuadraticObjectiveFamily {
        let built = match self {
            SynthPreset::Flat => {
                QuadraticObjectiveFamily::isotropic(vec![vec![0.0, 0.0], vec![1.0, 0.0]])
            }
            SynthPreset::Curved => QuadraticObjectiveFamily::new(
                vec![vec![0.0, 0.0], vec![1.0, 1.0]],
                vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 4.0]],
            ),
        };
        built.expect("preset families are valid")
    }

    pub fn base_weight(self) -> PreferenceWeight {
        PreferenceWeight::new(vec![0.5, 0.5]).expect("valid weight")
    }

    /// Geometric grid of 31 coefficients from 0.01 to 1.
    pub fn alphas(self) -> Vec<Vec<f64>> {
        (0..=30)
            .map(|i| vec![10f64.powf(-2.0 + 2.0 * i as f64 / 30.0)])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub preset: SynthPreset,
    pub curve: ErrorCurve,
    pub max_distance: f64,
    pub slope: Option<f64>,
    pub passed: bool,
}

/// Runs the extrapolation-error check for a preset: flat must stay on the
/// front, curved must show a second-order error.
pub fn synth_check(preset: SynthPreset) -> Result<SynthReport> {
    let fam = preset.family();
    let w = preset.base_weight();
    let base = fam.optimum(&w)?;
    let (dirs, _) = gradient_step_directions(&fam, &w, 0.1, 1.0)?;
    let curve = lle_error_curve(&fam, &base, &dirs, &preset.alphas())?;
    let max_distance = curve.max_distance();
    let slope = curve.slope;
    let passed = match preset {
        SynthPreset::Flat => max_distance <= FLAT_TOLERANCE,
        SynthPreset::Curved => {
            slope.is_some_and(|s| (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&s))
        }
    };
    Ok(SynthReport {
        preset,
        curve,
        max_distance,
        slope,
        passed,
    })
}
