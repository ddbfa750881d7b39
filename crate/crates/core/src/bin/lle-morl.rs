use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use lle_morl::distance::hungarian_distance;
use lle_morl::io::{
    archive_from_rows, front_svg, front_table, read_front_table, read_json, read_policy_archive,
    save_run, FrontRow, MetricsReport, PlotPoint, RunConfig,
};
use lle_morl::lle::run_pipeline;
use lle_morl::momdp::BuiltinEnv;
use lle_morl::pareto::{front_metrics, ReferencePoint, DEFAULT_EU_WEIGHTS};
use lle_morl::synth::{synth_check, SynthPreset};
use lle_morl::Error;

#[derive(Parser)]
#[command(name = "lle-morl", version, about = "Pareto front approximation by locally linear extension of policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a TOML configuration.
    Run {
        config: PathBuf,
        /// Overrides `[run] output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides `[run] seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute HV, EU and SP from a front table.
    Metrics {
        front: PathBuf,
        /// Reference point, e.g. `--ref=-10,-10`.
        #[arg(long = "ref", value_delimiter = ',', allow_hyphen_values = true)]
        reference: Option<Vec<f64>>,
        /// Take the reference point, seed and weight count from a metrics record.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_weights: Option<usize>,
    },
    /// Hungarian matching distance between two stored policies.
    Distance {
        archive_a: PathBuf,
        archive_b: PathBuf,
        /// Policy id in the first archive (default: first record).
        #[arg(long)]
        id_a: Option<u64>,
        /// Policy id in the second archive (default: first record).
        #[arg(long)]
        id_b: Option<u64>,
    },
    /// Check the extrapolation error on a synthetic quadratic family.
    SynthCheck {
        /// `flat` or `curved`.
        preset: String,
        /// Also write the error curve table here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the non-dominated front of a policy archive as a table.
    FrontExport {
        archive: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write an SVG scatter.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run { config, output_dir, seed } => cmd_run(&config, output_dir, seed),
        Command::Metrics { front, reference, metrics, seed, n_weights } => {
            cmd_metrics(&front, reference, metrics.as_deref(), seed, n_weights)
        }
        Command::Distance { archive_a, archive_b, id_a, id_b } => {
            cmd_distance(&archive_a, &archive_b, id_a, id_b)
        }
        Command::SynthCheck { preset, output } => cmd_synth_check(&preset, output.as_deref()),
        Command::FrontExport { archive, output, svg } => {
            cmd_front_export(&archive, output.as_deref(), svg.as_deref())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_run(config: &Path, output_dir: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(dir) = output_dir {
        cfg.run.output_dir = dir;
    }
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    let env = BuiltinEnv::by_name(&cfg.run.env, cfg.env)?;
    let start = Instant::now();
    let result = run_pipeline(&env, &cfg.lle_config(), &cfg.ppo, cfg.run.total_budget)?;
    let wall = start.elapsed().as_secs_f64();
    let metrics = save_run(&cfg.run.output_dir, &cfg, &result, wall)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "archive of {} policies written to {}",
        metrics.front.archive_size,
        cfg.run.output_dir.display()
    );
    println!(
        "hv {} eu {} sp {} ({:.1} s)",
        metrics.front.hv, metrics.front.eu, metrics.front.sp, wall
    );
    Ok(())
}

fn cmd_metrics(
    front: &Path,
    reference: Option<Vec<f64>>,
    record: Option<&Path>,
    seed: Option<u64>,
    n_weights: Option<usize>,
) -> Result<(), Failure> {
    let rows = read_front_table(front)?;
    let archive = archive_from_rows(&rows)?;
    if archive.is_empty() {
        return Err(Failure::Usage("front table has no rows".into()));
    }
    let saved: Option<MetricsReport> = record.map(read_json).transpose()?;
    let reference = match (reference, &saved) {
        (Some(r), _) => ReferencePoint(r),
        (None, Some(m)) => ReferencePoint(m.front.ref_point.clone()),
        (None, None) => ReferencePoint::below(archive.returns(), 1.0)?,
    };
    let seed = seed.or(saved.as_ref().map(|m| m.front.seed)).unwrap_or(0);
    let n_weights = n_weights
        .or(saved.as_ref().map(|m| m.front.n_weights))
        .unwrap_or(DEFAULT_EU_WEIGHTS);
    let metrics = front_metrics(&archive, &reference, n_weights, seed)?;
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(Error::from)?);
    Ok(())
}

fn pick(path: &Path, id: Option<u64>) -> Result<lle_morl::io::PolicyRecord, Failure> {
    let records = read_policy_archive(path)?;
    let found = match id {
        Some(id) => records.into_iter().find(|r| r.id == id),
        None => records.into_iter().next(),
    };
    found.ok_or_else(|| {
        Failure::Usage(format!(
            "{}: no policy{}",
            path.display(),
            id.map(|i| format!(" with id {i}")).unwrap_or_default()
        ))
    })
}

fn cmd_distance(a: &Path, b: &Path, id_a: Option<u64>, id_b: Option<u64>) -> Result<(), Failure> {
    let pa = pick(a, id_a)?;
    let pb = pick(b, id_b)?;
    let report = hungarian_distance(&pa.theta, &pb.theta)?;
    println!("combined {}", report.total);
    for layer in &report.layers {
        println!("{} {} ({} neurons)", layer.layer, layer.cost, layer.neurons);
    }
    Ok(())
}

fn cmd_synth_check(preset: &str, output: Option<&Path>) -> Result<(), Failure> {
    let preset = SynthPreset::from_name(preset)?;
    let report = synth_check(preset)?;
    let mut table = String::from("alpha_norm,distance\n");
    for s in &report.curve.samples {
        table.push_str(&format!("{},{}\n", s.alpha_norm, s.distance));
    }
    print!("{table}");
    if let Some(path) = output {
        std::fs::write(path, &table).map_err(Error::from)?;
    }
    let summary = serde_json::json!({
        "preset": preset.name(),
        "max_distance": report.max_distance,
        "slope": report.slope,
        "fit_window": report.curve.fit_window,
        "passed": report.passed,
    });
    println!("{summary}");
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("synth check failed for preset {}", preset.name())))
    }
}

fn cmd_front_export(archive: &Path, output: Option<&Path>, svg: Option<&Path>) -> Result<(), Failure> {
    let records = read_policy_archive(archive)?;
    let rows: Vec<FrontRow> = records
        .iter()
        .filter_map(|r| {
            r.returns.as_ref().map(|ret| FrontRow {
                policy_id: r.id,
                returns: ret.clone(),
                stage: r.stage.clone(),
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Failure::Usage(format!("{} has no evaluated policies", archive.display())));
    }
    let front = archive_from_rows(&rows)?;
    let kept: Vec<FrontRow> = rows
        .into_iter()
        .filter(|r| front.contains_id(r.policy_id))
        .collect();
    let table = front_table(&kept);
    match output {
        Some(path) => std::fs::write(path, &table).map_err(Error::from)?,
        None => print!("{table}"),
    }
    if let Some(path) = svg {
        let pts: Vec<PlotPoint> = kept
            .iter()
            .map(|r| PlotPoint { values: r.returns.clone(), stage: r.stage.clone() })
            .collect();
        std::fs::write(path, front_svg(&pts, "front")?).map_err(Error::from)?;
    }
    Ok(())
}
