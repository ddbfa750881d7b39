//! On-disk artifacts: policy archives, front and candidate tables, metrics,
//! run configuration, training logs and SVG scatter plots.
//!
//! A policy archive is a single file:
//!
//! ```text
//! b"LLEPOLAR"  | u32 LE version | u64 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header lists every record with its layout, metadata and the offset of
//! its parameters in the payload, so parameters round-trip bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lle::{BudgetLedger, CandidatePolicy, LleConfig, PipelineResult, StageHypervolume};
use crate::momdp::Physics;
use crate::pareto::{FrontMetrics, FrontPoint, ParetoArchive};
use crate::policy::{Layout, ParameterVector, PolicySpec};
use crate::ppo::PpoConfig;

const MAGIC: &[u8; 8] = b"LLEPOLAR";
const VERSION: u32 = 1;

/// One policy with the metadata needed to interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyRecord {
    pub id: u64,
    pub stage: String,
    pub weight: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
    pub base: Option<usize>,
    pub alpha: Option<Vec<f64>>,
    pub theta: ParameterVector,
}

impl PolicyRecord {
    pub fn from_candidate(c: &CandidatePolicy) -> Self {
        PolicyRecord {
            id: c.id,
            stage: c.stage.as_str().to_string(),
            weight: Some(c.matched_w.as_slice().to_vec()),
            returns: c.returns.as_ref().map(|r| r.values.clone()),
            base: Some(c.origin.base),
            alpha: Some(c.origin.alpha.clone()),
            theta: c.theta.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    id: u64,
    stage: String,
    weight: Option<Vec<f64>>,
    returns: Option<Vec<f64>>,
    base: Option<usize>,
    alpha: Option<Vec<f64>>,
    layout: Layout,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    records: Vec<RecordHeader>,
}

pub fn write_policy_archive(path: &Path, records: &[PolicyRecord]) -> Result<()> {
    let mut offset = 0u64;
    let headers: Vec<RecordHeader> = records
        .iter()
        .map(|r| {
            let h = RecordHeader {
                id: r.id,
                stage: r.stage.clone(),
                weight: r.weight.clone(),
                returns: r.returns.clone(),
                base: r.base,
                alpha: r.alpha.clone(),
                layout: (**r.theta.layout()).clone(),
                offset,
                len: r.theta.len() as u64,
            };
            offset += r.theta.len() as u64;
            h
        })
        .collect();
    let header = serde_json::to_vec(&ArchiveHeader { records: headers })?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for r in records {
        for x in r.theta.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_policy_archive(path: &Path) -> Result<Vec<PolicyRecord>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |detail: &str| Error::malformed("policy archive", format!("{}: {detail}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: ArchiveHeader = serde_json::from_slice(&bytes[20..payload_start])?;
    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    header
        .records
        .into_iter()
        .map(|h| {
            let (start, len) = (h.offset as usize, h.len as usize);
            let data = floats
                .get(start..start.saturating_add(len))
                .ok_or_else(|| bad(&format!("record {} runs past the payload", h.id)))?
                .to_vec();
            PolicySpec::from_layout(&h.layout)?;
            Ok(PolicyRecord {
                id: h.id,
                stage: h.stage,
                weight: h.weight,
                returns: h.returns,
                base: h.base,
                alpha: h.alpha,
                theta: ParameterVector::new(data, Arc::new(h.layout))?,
            })
        })
        .collect()
}

/// One row of a front table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub policy_id: u64,
    pub returns: Vec<f64>,
    pub stage: String,
}

/// Front table text: header `policy_id,obj_1,…,obj_d,stage`, one row per
/// archive member. Floats use the shortest representation that round-trips.
pub fn front_table(rows: &[FrontRow]) -> String {
    let d = rows.first().map_or(0, |r| r.returns.len());
    let mut out = String::from("policy_id");
    for i in 1..=d {
        let _ = write!(out, ",obj_{i}");
    }
    out.push_str(",stage\n");
    for r in rows {
        let _ = write!(out, "{}", r.policy_id);
        for x in &r.returns {
            let _ = write!(out, ",{x}");
        }
        let _ = writeln!(out, ",{}", r.stage);
    }
    out
}

pub fn parse_front_table(text: &str) -> Result<Vec<FrontRow>> {
    let bad = |line: usize, detail: String| Error::malformed("front table", format!("line {line}: {detail}"));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty table".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = cols.len().saturating_sub(2);
    let expected: Vec<String> = std::iter::once("policy_id".to_string())
        .chain((1..=d).map(|i| format!("obj_{i}")))
        .chain(std::iter::once("stage".to_string()))
        .collect();
    if d == 0 || cols != expected {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    lines
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 2 {
                return Err(bad(i + 1, format!("expected {} fields, found {}", d + 2, fields.len())));
            }
            let policy_id = fields[0]
                .parse()
                .map_err(|_| bad(i + 1, format!("bad policy id {:?}", fields[0])))?;
            let returns = fields[1..=d]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| bad(i + 1, format!("bad objective value {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(FrontRow {
                policy_id,
                returns,
                stage: fields[d + 1].to_string(),
            })
        })
        .collect()
}

pub fn read_front_table(path: &Path) -> Result<Vec<FrontRow>> {
    parse_front_table(&fs::read_to_string(path)?)
}

pub fn front_points(rows: &[FrontRow]) -> Vec<FrontPoint> {
    rows.iter()
        .map(|r| FrontPoint::new(r.policy_id, r.returns.clone()))
        .collect()
}

/// Front rows for the archive of a pipeline run.
pub fn archive_rows(result: &PipelineResult) -> Vec<FrontRow> {
    result
        .members()
        .into_iter()
        .map(|c| FrontRow {
            policy_id: c.id,
            returns: c.returns.as_ref().map(|r| r.values.clone()).unwrap_or_default(),
            stage: c.stage.as_str().to_string(),
        })
        .collect()
}

/// Every extension candidate with its coefficients, weights and
/// selection-grade returns.
pub fn candidate_table(result: &PipelineResult) -> String {
    let d = result.d;
    let m = d - 1;
    let mut out = String::from("policy_id,base");
    for i in 1..=m {
        let _ = write!(out, ",alpha_{i}");
    }
    for i in 1..=d {
        let _ = write!(out, ",raw_w_{i}");
    }
    for i in 1..=d {
        let _ = write!(out, ",w_{i}");
    }
    for i in 1..=d {
        let _ = write!(out, ",obj_{i}");
    }
    out.push_str(",selected,stage\n");
    for c in &result.candidates {
        let _ = write!(out, "{},{}", c.id, c.origin.base);
        let cells = c
            .origin
            .alpha
            .iter()
            .chain(&c.raw_matched_w)
            .chain(c.matched_w.as_slice());
        for x in cells {
            let _ = write!(out, ",{x}");
        }
        match &c.returns {
            Some(r) => r.values.iter().for_each(|x| {
                let _ = write!(out, ",{x}");
            }),
            None => (0..d).for_each(|_| out.push_str(",nan")),
        }
        let selected = result.selected.iter().any(|s| s.id == c.id);
        let _ = writeln!(out, ",{selected},{}", c.stage.as_str());
    }
    out
}

/// Metrics record written next to every front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub front: FrontMetrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stage_hv: Option<StageHypervolume>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub budget: Option<BudgetLedger>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// `[run]` section of a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub env: String,
    pub total_budget: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            env: "dual_goal".into(),
            total_budget: 150_000,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Complete run configuration; every field has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub lle: LleConfig,
    pub ppo: PpoConfig,
    pub env: Physics,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The pipeline configuration with the run seed filled in.
    pub fn lle_config(&self) -> LleConfig {
        LleConfig {
            seed: self.run.seed,
            ..self.lle.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::momdp::BuiltinKind::from_name(&self.run.env)?;
        self.lle_config().validate()?;
        self.ppo.validate()
    }
}

/// Appends one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    BufReader::new(fs::File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// A point in a scatter plot.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotPoint {
    pub values: Vec<f64>,
    pub stage: String,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;

fn marker(stage: &str, x: f64, y: f64) -> String {
    match stage {
        "base" => format!(
            "<path d=\"M{:.2} {:.2} l7 7 l-7 7 l-7 -7 z\" fill=\"#d62728\" stroke=\"black\"/>",
            x,
            y - 7.0
        ),
        "fine_tuned" => format!(
            "<path d=\"M{:.2} {:.2} l5 9 l-10 0 z\" fill=\"#2ca02c\" fill-opacity=\"0.8\"/>",
            x,
            y - 5.0
        ),
        "extended" => format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#1f77b4\" fill-opacity=\"0.8\"/>"
        ),
        _ => format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"7\" height=\"7\" fill=\"#7f7f7f\"/>",
            x - 3.5,
            y - 3.5
        ),
    }
}

fn panel(out: &mut String, pts: &[PlotPoint], (i, j): (usize, usize), frame: (f64, f64, f64, f64)) {
    let (left, top, w, h) = frame;
    let range = |k: usize| {
        let (lo, hi) = pts.iter().map(|p| p.values[k]).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let ((x0, x1), (y0, y1)) = (range(i), range(j));
    let _ = writeln!(
        out,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"black\"/>"
    );
    for (k, v) in [(0.0, x0), (1.0, x1)] {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{v:.3}</text>",
            left + k * w,
            top + h + 14.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>",
            left - 4.0,
            top + h - k * h,
            if k == 0.0 { y0 } else { y1 }
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">objective {}</text>",
        left + w / 2.0,
        top + h + 30.0,
        i + 1
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 {:.2} {:.2})\">objective {}</text>",
        left - 40.0,
        top + h / 2.0,
        left - 40.0,
        top + h / 2.0,
        j + 1
    );
    // Bases last so they sit on top.
    let mut order: Vec<&PlotPoint> = pts.iter().collect();
    order.sort_by_key(|p| p.stage == "base");
    for p in order {
        let x = left + (p.values[i] - x0) / (x1 - x0) * w;
        let y = top + h - (p.values[j] - y0) / (y1 - y0) * h;
        out.push_str(&marker(&p.stage, x, y));
        out.push('\n');
    }
}

/// 800×600 scatter of a front. Two objectives give one panel; three give the
/// three pairwise projections. Marker shape encodes the stage and base
/// policies are drawn as red diamonds.
pub fn front_svg(points: &[PlotPoint], title: &str) -> Result<String> {
    let d = points.first().map_or(0, |p| p.values.len());
    if points.iter().any(|p| p.values.len() != d) {
        return Err(Error::malformed("plot", "points have different dimensions"));
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    match d {
        0 => {}
        2 => panel(&mut out, points, (0, 1), (90.0, 50.0, 660.0, 480.0)),
        3 => {
            for (k, pair) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
                panel(&mut out, points, pair, (70.0 + k as f64 * 250.0, 120.0, 190.0, 380.0));
            }
        }
        _ => return Err(Error::Unsupported(format!("plotting {d} objectives"))),
    }
    let legend = [("base", "base policy"), ("extended", "extended"), ("fine_tuned", "fine-tuned")];
    for (k, (stage, label)) in legend.iter().enumerate() {
        let y = HEIGHT - 16.0;
        let x = 120.0 + k as f64 * 200.0;
        out.push_str(&marker(stage, x, y - 4.0));
        let _ = writeln!(out, "\n<text x=\"{:.2}\" y=\"{y:.2}\" font-size=\"12\">{label}</text>", x + 12.0);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Points for the run scatter: archive members plus the base policies.
pub fn plot_points(result: &PipelineResult) -> Vec<PlotPoint> {
    let mut pts: Vec<PlotPoint> = archive_rows(result)
        .into_iter()
        .map(|r| PlotPoint {
            values: r.returns,
            stage: r.stage,
        })
        .collect();
    pts.extend(result.bases.iter().map(|b| PlotPoint {
        values: b.returns.values.clone(),
        stage: "base".into(),
    }));
    pts
}

/// Rebuilds an archive from table rows.
pub fn archive_from_rows(rows: &[FrontRow]) -> Result<ParetoArchive> {
    crate::pareto::non_dominated_filter(&front_points(rows))
}

/// Writes every artifact of a pipeline run into `dir` and returns the
/// metrics record that was saved.
pub fn save_run(
    dir: &Path,
    cfg: &RunConfig,
    result: &PipelineResult,
    wall_clock_seconds: f64,
) -> Result<MetricsReport> {
    fs::create_dir_all(dir.join("policies"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let bases: Vec<PolicyRecord> = result
        .bases
        .iter()
        .map(|b| PolicyRecord {
            id: b.index as u64,
            stage: "base".into(),
            weight: Some(b.weight.as_slice().to_vec()),
            returns: Some(b.returns.values.clone()),
            base: Some(b.index),
            alpha: None,
            theta: b.theta.clone(),
        })
        .collect();
    let directional: Vec<PolicyRecord> = result
        .directions
        .iter()
        .flat_map(|s| {
            let m = s.retrained.len();
            s.retrained.iter().enumerate().map(move |(i, theta)| PolicyRecord {
                id: (s.base_index * m + i) as u64,
                stage: "directional".into(),
                weight: Some(s.retrained_w[i].as_slice().to_vec()),
                returns: Some(s.retrained_returns[i].values.clone()),
                base: Some(s.base_index),
                alpha: None,
                theta: theta.clone(),
            })
        })
        .collect();
    let records = |cs: &[CandidatePolicy]| cs.iter().map(PolicyRecord::from_candidate).collect::<Vec<_>>();
    let members: Vec<PolicyRecord> = result
        .members()
        .into_iter()
        .map(PolicyRecord::from_candidate)
        .collect();
    write_policy_archive(&dir.join("policies/bases.bin"), &bases)?;
    write_policy_archive(&dir.join("policies/directional.bin"), &directional)?;
    write_policy_archive(&dir.join("policies/selected.bin"), &records(&result.selected))?;
    write_policy_archive(&dir.join("policies/fine_tuned.bin"), &records(&result.fine_tuned))?;
    write_policy_archive(&dir.join("policies/archive.bin"), &members)?;

    fs::write(dir.join("candidates.csv"), candidate_table(result))?;
    fs::write(dir.join("front.csv"), front_table(&archive_rows(result)))?;
    fs::write(
        dir.join("front.svg"),
        front_svg(&plot_points(result), &format!("{} front, seed {}", cfg.run.env, cfg.run.seed))?,
    )?;
    let log_lines: Vec<serde_json::Value> = result
        .logs
        .iter()
        .flat_map(|run| {
            run.records.iter().map(move |r| {
                let mut v = serde_json::to_value(r).unwrap_or_default();
                if let Some(obj) = v.as_object_mut() {
                    obj.insert("run".into(), run.label.clone().into());
                }
                v
            })
        })
        .collect();
    write_jsonl(&dir.join("train_log.jsonl"), &log_lines)?;

    let metrics = MetricsReport {
        front: crate::pareto::front_metrics(
            &result.archive,
            &result.reference,
            crate::pareto::DEFAULT_EU_WEIGHTS,
            cfg.run.seed,
        )?,
        stage_hv: Some(result.stage_hv),
        budget: Some(result.ledger.clone()),
        wall_clock_seconds: Some(wall_clock_seconds),
        warnings: result.warnings.clone(),
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}
