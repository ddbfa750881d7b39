//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use lle_morl::distance::hungarian_distance;
use lle_morl::io::{archive_rows, front_table};
use lle_morl::lle::{run_pipeline, shift_weight, LleConfig, PipelineResult};
use lle_morl::momdp::{BuiltinEnv, PreferenceWeight};
use lle_morl::pareto::{
    expected_utility, hypervolume, hypervolume_of, non_dominated_filter, sparsity, FrontPoint,
    ReferencePoint,
};
use lle_morl::policy::{
    evaluate_episodes, flatten, BlockKind, GaussianPolicy, ParameterVector, PolicySpec,
};
use lle_morl::ppo::{collect_batch, loss_and_gradient, train, PpoConfig};
use lle_morl::synth::{synth_check, SynthPreset, FLAT_TOLERANCE, SLOPE_RANGE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PIPELINE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const BUDGET: u64 = 150_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- metrics

/// Fraction of uniform box samples dominated by some point, times box volume.
fn monte_carlo_hv(points: &[Vec<f64>], reference: &[f64], samples: usize, seed: u64) -> f64 {
    let d = reference.len();
    let upper: Vec<f64> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let volume: f64 = (0..d).map(|k| upper[k] - reference[k]).product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut x = vec![0.0; d];
    for _ in 0..samples {
        for k in 0..d {
            x[k] = rng.random_range(reference[k]..upper[k]);
        }
        if points.iter().any(|p| p.iter().zip(&x).all(|(a, b)| a >= b)) {
            hits += 1;
        }
    }
    volume * hits as f64 / samples as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let d = if trial < 10 { 2 } else { 3 };
        let n = rng.random_range(3..25);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0.5..10.0)).collect())
            .collect();
        let reference = vec![0.0; d];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let exact = hypervolume_of(&refs, &reference).unwrap();
        let mc = monte_carlo_hv(&pts, &reference, 1_000_000, trial);
        worst = worst.max((exact - mc).abs() / mc);
    }
    let archive = |pts: &[&[f64]]| {
        let fp: Vec<FrontPoint> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| FrontPoint::new(i as u64, p.to_vec()))
            .collect();
        non_dominated_filter(&fp).unwrap()
    };
    let hv6 = hypervolume(
        &archive(&[&[3.0, 1.0], &[1.0, 3.0], &[2.0, 2.0]]),
        &ReferencePoint(vec![0.0, 0.0]),
    )
    .unwrap();
    let eu = expected_utility(&archive(&[&[1.0, 0.0], &[0.0, 1.0]]), 1_000_000, 7).unwrap();
    let sp = sparsity(&archive(&[&[0.0, 2.0], &[1.0, 1.0], &[2.0, 0.0]]));
    let pass = worst <= 0.01 && hv6 == 6.0 && (eu - 0.75).abs() <= 0.005 && sp == 2.0;
    outcome(
        pass,
        format!("max HV rel. err vs Monte Carlo {worst:.2e}; HV={hv6}; EU={eu:.4}; SP={sp}"),
    )
}

// ---------------------------------------------------------------- distance

/// `(layer name, neuron vectors)` read straight from the flat layout.
fn neuron_vectors(theta: &ParameterVector) -> Vec<(String, Vec<Vec<f64>>)> {
    let blocks: Vec<_> = theta.layout().offsets().map(|(o, b)| (o, *b)).collect();
    let data = theta.data();
    let mut out = Vec::new();
    for (k, (off, b)) in blocks.iter().enumerate() {
        if b.kind != BlockKind::Weight {
            continue;
        }
        let (boff, _) = blocks[k + 1];
        let neurons = (0..b.rows)
            .map(|i| {
                let mut v = data[off + i * b.cols..off + (i + 1) * b.cols].to_vec();
                v.push(data[boff + i]);
                v
            })
            .collect();
        out.push((format!("{}.{}", b.net, b.layer), neurons));
    }
    out
}

fn brute_force_matching(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn go(a: &[Vec<f64>], b: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                let c = a[row].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                go(a, b, row + 1, used, acc + c, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(a, b, 0, &mut vec![false; b.len()], 0.0, &mut best);
    best
}

fn hungarian_criterion() -> Outcome {
    let spec = PolicySpec::actor_critic(4, 2, &[7, 5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut max_err = 0.0f64;
    let mut max_asym = 0.0f64;
    for _ in 0..50 {
        let a = flatten(&GaussianPolicy::init(&spec, &mut rng));
        let b = flatten(&GaussianPolicy::init(&spec, &mut rng));
        let report = hungarian_distance(&a, &b).unwrap();
        let (na, nb) = (neuron_vectors(&a), neuron_vectors(&b));
        for ((name, va), (_, vb)) in na.iter().zip(&nb) {
            let got = report.layer(name).unwrap().cost;
            let want = brute_force_matching(va, vb);
            max_err = max_err.max((got - want).abs() / want.max(1e-300));
        }
        let back = hungarian_distance(&b, &a).unwrap().total;
        max_asym = max_asym.max((back - report.total).abs() / report.total);
    }
    // Permuted copy: shuffle the neurons of every layer, incoming rows and
    // biases together.
    let original = GaussianPolicy::init(&spec, &mut rng);
    let mut permuted = original.clone();
    for net in [&mut permuted.mean_net, permuted.critic.as_mut().unwrap()] {
        for layer in &mut net.layers {
            let n = layer.outputs;
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let (w, bias) = (layer.weight.clone(), layer.bias.clone());
            for (new, &old) in order.iter().enumerate() {
                let cols = layer.inputs;
                layer.weight[new * cols..(new + 1) * cols].copy_from_slice(&w[old * cols..(old + 1) * cols]);
                layer.bias[new] = bias[old];
            }
        }
    }
    let zero = hungarian_distance(&flatten(&original), &flatten(&permuted)).unwrap().total;
    let pass = zero == 0.0 && max_err <= 1e-12 && max_asym <= 1e-12;
    outcome(
        pass,
        format!("permuted copy {zero}; max rel. err vs brute force {max_err:.1e} over 50 pairs; asymmetry {max_asym:.1e}"),
    )
}

// ---------------------------------------------------------------- gradient

fn gradient_check() -> Outcome {
    let env = BuiltinEnv::dual_goal();
    let spec = PolicySpec::actor_critic(4, 2, &[16, 16]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta0 = flatten(&GaussianPolicy::init(&spec, &mut rng));
    let w = PreferenceWeight::new(vec![0.6, 0.4]).unwrap();
    let cfg = PpoConfig { steps_per_batch: 256, ..PpoConfig::default() };
    let buffer = collect_batch(&theta0, &env, &w, &cfg, 9).unwrap();
    // Move away from the behaviour policy so some ratios are clipped.
    let mut theta = theta0.clone();
    for x in theta.data_mut() {
        *x += 0.05 * rng.random_range(-1.0..1.0);
    }
    let minibatch: Vec<usize> = (0..64).collect();
    let (loss, grad) = loss_and_gradient(&theta, &buffer, &minibatch, &cfg).unwrap();
    let f = |t: &ParameterVector| loss_and_gradient(t, &buffer, &minibatch, &cfg).unwrap().0.total;
    let h = 1e-6;
    let mut ok = 0;
    let probes = 100;
    for _ in 0..probes {
        let i = rng.random_range(0..theta.len());
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let analytic = grad.data()[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        if rel <= 1e-4 {
            ok += 1;
        }
    }
    outcome(
        ok * 100 >= 95 * probes,
        format!("{ok}/{probes} coordinates within 1e-4 (clip fraction {:.2})", loss.clip_fraction),
    )
}

// ---------------------------------------------------------------- training

fn speed_energy_sanity() -> Outcome {
    let env = BuiltinEnv::speed_energy();
    let spec = PolicySpec::actor_critic(2, 1, &[64, 64]).unwrap();
    let w = PreferenceWeight::new(vec![1.0, 0.0]).unwrap();
    let mut passed = 0;
    let mut sigmas = Vec::new();
    for seed in 0..5u64 {
        let theta0 = flatten(&GaussianPolicy::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed)));
        let out = train(&theta0, &env, &w, 50_000, &PpoConfig::default(), seed).unwrap();
        let stats = |t: &ParameterVector| {
            let eps = evaluate_episodes(t, &env, 32, 1000 + seed, false).unwrap();
            let xs: Vec<f64> = eps.iter().map(|e| e[0]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            (mean, var.sqrt())
        };
        let (m0, s0) = stats(&theta0);
        let (m1, s1) = stats(&out.theta);
        let sigma = (m1 - m0) / s0.max(s1);
        sigmas.push(sigma);
        if sigma >= 5.0 {
            passed += 1;
        }
    }
    let shown: Vec<String> = sigmas.iter().map(|s| format!("{s:.1}")).collect();
    outcome(
        passed >= 4,
        format!("{passed}/5 seeds improve by >= 5 sd (improvement in sd: {})", shown.join(", ")),
    )
}

fn sanity_check_distance() -> Outcome {
    let env = BuiltinEnv::dual_goal();
    let spec = PolicySpec::actor_critic(4, 2, &[64, 64]).unwrap();
    let ppo = PpoConfig::default();
    let w = PreferenceWeight::new(vec![0.5, 0.5]).unwrap();
    let shifted = shift_weight(&w, 1, 0.1).unwrap();
    let mut passed = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let init = |s: u64| flatten(&GaussianPolicy::init(&spec, &mut ChaCha8Rng::seed_from_u64(s)));
        let base = train(&init(seed), &env, &w, 15_000, &ppo, seed).unwrap().theta;
        let retrained = train(&base, &env, &shifted, 5_000, &ppo, seed + 100).unwrap().theta;
        let independent = train(&init(seed + 500), &env, &shifted, 15_000, &ppo, seed + 500)
            .unwrap()
            .theta;
        let near = hungarian_distance(&base, &retrained).unwrap().total;
        let far = hungarian_distance(&base, &independent).unwrap().total;
        pairs.push(format!("{near:.1}<{far:.1}"));
        if near < far {
            passed += 1;
        }
    }
    outcome(passed >= 4, format!("{passed}/5 seeds: {}", pairs.join(", ")))
}

// ---------------------------------------------------------------- pipeline

fn pipeline_cfg(seed: u64, t_ref: Option<u64>) -> LleConfig {
    LleConfig { seed, t_ref, ..LleConfig::default() }
}

fn run(seed: u64, t_ref: Option<u64>) -> PipelineResult {
    run_pipeline(&BuiltinEnv::dual_goal(), &pipeline_cfg(seed, t_ref), &PpoConfig::default(), BUDGET)
        .expect("pipeline run")
}

fn monotonicity(full: &[PipelineResult]) -> Outcome {
    let mut ok = true;
    let mut shown = Vec::new();
    for r in full {
        let hv_bases = hypervolume(&r.base_archive().unwrap(), &r.reference).unwrap();
        let hv_final = hypervolume(&r.archive, &r.reference).unwrap();
        let led = &r.ledger;
        let expected_eval = (r.candidates.len() * 8 * 100) as u64;
        let plan = led.plan.as_ref().unwrap();
        ok &= hv_final >= hv_bases
            && led.extension_train_steps == 0
            && led.extension_eval_steps == expected_eval
            && led.train_steps() <= plan.total_budget;
        shown.push(format!("{:.0}->{:.0}", hv_bases, hv_final));
    }
    outcome(
        ok,
        format!("HV bases->final per seed: {}; extension training steps 0", shown.join(", ")),
    )
}

fn fine_tuning_value(full: &[PipelineResult], zero: &[PipelineResult]) -> Outcome {
    let mut wins = 0;
    let mut strict = 0;
    let mut shown = Vec::new();
    for (a, b) in full.iter().zip(zero) {
        let reference = ReferencePoint(
            a.reference.0.iter().zip(&b.reference.0).map(|(x, y)| x.min(*y)).collect(),
        );
        let hv_full = hypervolume(&a.archive, &reference).unwrap();
        let hv_zero = hypervolume(&b.archive, &reference).unwrap();
        if hv_full >= hv_zero {
            wins += 1;
        }
        if hv_full > hv_zero {
            strict += 1;
        }
        shown.push(format!("{hv_full:.0} vs {hv_zero:.0}"));
    }
    outcome(
        wins >= 4,
        format!("{wins}/5 runs HV(full) >= HV(no fine-tuning), {strict}/5 strictly: {}", shown.join(", ")),
    )
}

fn theory_check() -> Outcome {
    let flat = synth_check(SynthPreset::Flat).unwrap();
    let curved = synth_check(SynthPreset::Curved).unwrap();
    let slope = curved.slope.unwrap_or(f64::NAN);
    let pass = flat.max_distance <= FLAT_TOLERANCE && (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope);
    outcome(
        pass,
        format!("flat max distance {:.1e}; curved slope {slope:.3}", flat.max_distance),
    )
}

fn determinism(first: &PipelineResult) -> Outcome {
    let again = run(PIPELINE_SEEDS[0], None);
    let (a, b) = (front_table(&archive_rows(first)), front_table(&archive_rows(&again)));
    outcome(a == b, format!("front tables of two runs with seed {} are identical ({} bytes)", PIPELINE_SEEDS[0], a.len()))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {} ({:.1} s)", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    };
    report("metric oracles", &mut metric_oracles);
    report("hungarian distance", &mut hungarian_criterion);
    report("ppo gradient check", &mut gradient_check);
    report("theory check", &mut theory_check);
    report("single-objective training sanity", &mut speed_energy_sanity);
    report("sanity-check distance", &mut sanity_check_distance);

    let start = Instant::now();
    let full: Vec<PipelineResult> = PIPELINE_SEEDS.iter().map(|&s| run(s, None)).collect();
    let zero: Vec<PipelineResult> = PIPELINE_SEEDS.iter().map(|&s| run(s, Some(0))).collect();
    println!("  (ran {} pipelines in {:.1} s)", full.len() + zero.len(), start.elapsed().as_secs_f64());
    report("pipeline monotonicity", &mut || monotonicity(&full));
    report("fine-tuning value", &mut || fine_tuning_value(&full, &zero));
    report("determinism", &mut || determinism(&full[0]));

    if failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
