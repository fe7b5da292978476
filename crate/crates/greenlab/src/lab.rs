//! Scenario orchestration: strict JSON configs, task execution, sweeps,
//! content-addressed caching, and 17-significant-digit artifact output.

use crate::classifier::{self, Report, Verdict};
use crate::excursion::Solver;
use crate::group::{FactorKind, FactorSpec, WalkSpec};
use crate::series::{self, Precision};
use crate::strip::{self, StripKernel};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Bumped whenever numeric behavior changes; part of every cache key.
pub const LAB_VERSION: &str = "greenlab-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum FactorJson {
    Lattice {
        rank: usize,
        steps: Vec<(Vec<i64>, f64)>,
    },
    Finite {
        table: Vec<Vec<usize>>,
        steps: Vec<(usize, f64)>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkJson {
    #[serde(default)]
    pub laziness: f64,
    pub factors: Vec<FactorJson>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct SweepJson {
    pub parameter: String,
    pub grid: Vec<f64>,
    #[serde(default)]
    pub exponent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct TasksJson {
    #[serde(default)]
    pub radius: bool,
    #[serde(default)]
    pub classify: bool,
    /// Series order N for the exponent check.
    #[serde(default)]
    pub exponent: Option<usize>,
    #[serde(default)]
    pub sweep: Option<SweepJson>,
    #[serde(default)]
    pub strip_checks: bool,
    #[serde(default)]
    pub monitors: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct NumericsJson {
    #[serde(default)]
    pub series_order: Option<usize>,
    /// "double" (default) or "dd".
    #[serde(default)]
    pub precision_mode: Option<String>,
    /// Number of boundary-ladder rungs for the excursions table.
    #[serde(default)]
    pub ladders: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub walk: WalkJson,
    #[serde(default)]
    pub tasks: TasksJson,
    #[serde(default)]
    pub numerics: NumericsJson,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| anyhow!("ConfigInvalid: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            bail!("ConfigInvalid at /version: unsupported version {}", self.version);
        }
        if let Some(n) = self.numerics.series_order {
            if !n.is_power_of_two() || !(256..=65536).contains(&n) {
                bail!("ConfigInvalid at /numerics/seriesOrder: {n} is not a power of two in [256, 65536]");
            }
        }
        if let Some(n) = self.tasks.exponent {
            if !n.is_power_of_two() || !(256..=65536).contains(&n) {
                bail!("ConfigInvalid at /tasks/exponent: {n} is not a power of two in [256, 65536]");
            }
        }
        if let Some(m) = &self.numerics.precision_mode {
            if m != "double" && m != "dd" {
                bail!("ConfigInvalid at /numerics/precisionMode: expected \"double\" or \"dd\"");
            }
        }
        if let Some(sw) = &self.tasks.sweep {
            if sw.grid.windows(2).any(|w| w[0] >= w[1]) {
                bail!("ConfigInvalid at /tasks/sweep/grid: grid must be strictly increasing");
            }
            if sw.grid.is_empty() {
                bail!("ConfigInvalid at /tasks/sweep/grid: empty grid");
            }
        }
        self.to_walk()?;
        Ok(())
    }

    pub fn to_walk(&self) -> Result<WalkSpec> {
        let mut factors = Vec::with_capacity(self.walk.factors.len());
        for (id, f) in self.walk.factors.iter().enumerate() {
            let spec = match f {
                FactorJson::Lattice { rank, steps } => FactorSpec {
                    id,
                    kind: FactorKind::Lattice { rank: *rank },
                    step: steps
                        .iter()
                        .map(|(x, w)| (crate::group::FactorElem::Lattice(x.clone()), *w))
                        .collect(),
                },
                FactorJson::Finite { table, steps } => FactorSpec {
                    id,
                    kind: FactorKind::Finite { table: table.clone() },
                    step: steps
                        .iter()
                        .map(|(x, w)| (crate::group::FactorElem::Finite(*x), *w))
                        .collect(),
                },
            };
            factors.push(spec);
        }
        let walk = WalkSpec {
            factors,
            weights: self.walk.weights.clone(),
            laziness: self.walk.laziness,
        };
        walk.validate()
            .map_err(|e| anyhow!("ConfigInvalid at /walk: {e}"))?;
        Ok(walk)
    }

    pub fn series_order(&self) -> usize {
        self.numerics.series_order.unwrap_or(4096)
    }

    pub fn precision(&self) -> Precision {
        match self.numerics.precision_mode.as_deref() {
            Some("dd") => Precision::DoubleDouble,
            _ => Precision::Double,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub threads: Option<usize>,
    pub precision_override: Option<Precision>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub param: f64,
    pub radius: Option<f64>,
    pub margins: Vec<f64>,
    pub verdict: String,
    pub kappa_star: Option<f64>,
    pub kappa_empirical: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
    /// True when the minimum factor margin is monotone along the grid
    /// (nonincreasing or nondecreasing within 1e-9 slack).
    pub margin_trend_monotone: bool,
    /// First grid value classified convergent, if any.
    pub phase_boundary: Option<f64>,
}

/// Everything a scenario run can produce; the artifact files are generated
/// from this single structure so cached and fresh runs agree bit for bit.
#[derive(Debug, Clone, Serialize, Default)]
pub struct RunOutput {
    pub scenario_hash: String,
    pub radius: Option<f64>,
    pub boundary_type: Option<String>,
    pub report: Option<Report>,
    pub exponent: Option<classifier::ExponentCheck>,
    pub monitors: Option<classifier::MonitorReport>,
    pub sweep: Option<SweepSummary>,
    /// (r, e_p…, c_p…, s_p…) ladder rows.
    pub excursion_rows: Vec<Vec<f64>>,
    pub rho_rows: Vec<strip::RhoPoint>,
    pub series_csv: Option<String>,
}

fn verdict_name(v: &Verdict) -> &'static str {
    match v {
        Verdict::Convergent => "convergent",
        Verdict::DivergentSpectrallyPositiveRecurrent => {
            "divergent_spectrally_positive_recurrent"
        }
        Verdict::NearCritical => "near_critical",
    }
}

/// First-return kernel of a lattice factor as a scalar strip kernel at r:
/// the diagonal c_p(r) plus the in-factor step r a_p mu_p.
fn return_kernel_strip(solver: &Solver, p: usize, r: f64) -> Result<Option<StripKernel>> {
    let k = solver.first_return_kernel(p, r)?;
    let rank = solver.walk.factors[p].rank();
    if rank == 0 {
        return Ok(None);
    }
    let mut support: Vec<(Vec<i64>, f64)> = vec![(vec![0; rank], k.diagonal)];
    for (x, w) in &k.step {
        if let crate::group::FactorElem::Lattice(v) = x {
            support.push((v.clone(), *w));
        }
    }
    Ok(Some(StripKernel::scalar(rank, support)))
}

/// Executes one scenario (no caching at this level).
pub fn execute(cfg: &ScenarioConfig) -> Result<RunOutput> {
    series::set_precision(cfg.precision());
    let walk = cfg.to_walk()?;
    let n = cfg.series_order();
    let solver = Solver::with_order(&walk, n).context("building solver")?;
    let mut out = RunOutput::default();

    let need_radius = cfg.tasks.radius
        || cfg.tasks.classify
        || cfg.tasks.exponent.is_some()
        || cfg.tasks.strip_checks
        || cfg.tasks.monitors;
    if !need_radius && cfg.tasks.sweep.is_none() {
        bail!("ConfigInvalid at /tasks: no task requested");
    }

    let mut rad = None;
    if need_radius {
        let rep = solver.locate_radius()?;
        out.radius = Some(rep.radius);
        out.boundary_type = Some(match &rep.boundary {
            crate::excursion::BoundaryType::BranchPoint => "branch_point".to_string(),
            crate::excursion::BoundaryType::DegeneracyContact { .. } => {
                "degeneracy_contact".to_string()
            }
        });
        // Excursion ladder table.
        let rungs = cfg.numerics.ladders.unwrap_or(17);
        let mut warm: Option<Vec<f64>> = None;
        for i in 0..rungs {
            let frac = (i + 1) as f64 / rungs as f64;
            let r = rep.radius * (1.0 - 10f64.powf(-6.0 * frac)).max(frac * 0.05);
            let sol = solver.solve_numeric(r, warm.as_deref())?;
            let mut row = vec![r];
            row.extend(&sol.e);
            row.extend(&sol.c);
            row.extend(&sol.s);
            out.excursion_rows.push(row);
            warm = Some(sol.e);
        }
        rad = Some(rep);
    }

    if cfg.tasks.classify || cfg.tasks.exponent.is_some() || cfg.tasks.monitors {
        let rad = rad.as_ref().unwrap();
        let mut report = classifier::classify_with(&solver, rad)?;
        if let Some(n_exp) = cfg.tasks.exponent {
            let chk = classifier::verify_exponent_with(&solver, rad, &report, n_exp)?;
            report.kappa_empirical = Some(chk.kappa_empirical);
            report.kappa_uncertainty = Some(chk.kappa_uncertainty);
            let series = solver.green_series(n_exp, rad.radius)?;
            out.series_csv = Some(series.to_csv());
            out.exponent = Some(chk);
        }
        if cfg.tasks.monitors {
            out.monitors = Some(classifier::ij_ratio_monitor(&solver, rad.radius, None)?);
        }
        report.diagnostics.radius_cross_check_rel =
            solver.radius_cross_check(rad, n.min(2048)).ok();
        out.report = Some(report);
    }

    if cfg.tasks.strip_checks {
        let rad = rad.as_ref().unwrap();
        // rho-curve of the first lattice factor's first-return kernel.
        if let Some(p) = (0..walk.factors.len()).find(|&p| walk.factors[p].rank() > 0) {
            let radius = rad.radius;
            let family = |r: f64| -> StripKernel {
                return_kernel_strip(&solver, p, r)
                    .ok()
                    .flatten()
                    .expect("lattice factor kernel")
            };
            let grid: Vec<f64> = (1..=8).map(|i| radius * 0.96 * i as f64 / 8.0).collect();
            out.rho_rows = strip::rho_curve(&family, None, &grid)?;
        }
    }

    if let Some(sw) = &cfg.tasks.sweep {
        out.sweep = Some(run_sweep(cfg, sw)?);
    }
    Ok(out)
}

/// Addresses a numeric field in the scenario JSON by a dotted path with
/// optional indices, e.g. `walk.weights[0]` or `walk.laziness`.
pub fn set_parameter(value: &mut serde_json::Value, path: &str, new: f64) -> Result<()> {
    let mut cur = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (si, seg) in segments.iter().enumerate() {
        let (field, indices) = match seg.find('[') {
            Some(k) => (&seg[..k], &seg[k..]),
            None => (&seg[..], ""),
        };
        if !field.is_empty() {
            cur = cur
                .get_mut(field)
                .ok_or_else(|| anyhow!("ConfigInvalid: no field '{field}' in parameter path"))?;
        }
        for idx in indices.trim_end_matches(']').split("[").skip(1) {
            let idx = idx.trim_end_matches(']');
            let i: usize = idx.parse().context("parameter index")?;
            cur = cur
                .get_mut(i)
                .ok_or_else(|| anyhow!("ConfigInvalid: index {i} out of range in parameter path"))?;
        }
        if si + 1 == segments.len() {
            if !cur.is_number() {
                bail!("ConfigInvalid: parameter path does not address a number");
            }
            *cur = serde_json::json!(new);
        }
    }
    Ok(())
}

pub fn renormalize_weights(cfg: &mut ScenarioConfig) {
    let s: f64 = cfg.walk.weights.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 1e-15 {
        for w in &mut cfg.walk.weights {
            *w /= s;
        }
    }
}

fn run_sweep(base: &ScenarioConfig, sw: &SweepJson) -> Result<SweepSummary> {
    use rayon::prelude::*;
    let base_value = serde_json::to_value(base)?;
    let precision = base.precision();
    let rows: Vec<SweepRow> = sw
        .grid
        .par_iter()
        .map(|&param| -> SweepRow {
            series::set_precision(precision);
            let attempt = || -> Result<SweepRow> {
                let mut v = base_value.clone();
                set_parameter(&mut v, &sw.parameter, param)?;
                let mut cfg: ScenarioConfig = serde_json::from_value(v)?;
                renormalize_weights(&mut cfg);
                cfg.tasks = TasksJson::default();
                let walk = cfg.to_walk()?;
                let order = if sw.exponent { cfg.series_order() } else { 512 };
                let solver = Solver::with_order(&walk, order)?;
                let rad = solver.locate_radius()?;
                let report = classifier::classify_with(&solver, &rad)?;
                let kappa_empirical = if sw.exponent {
                    classifier::verify_exponent_with(&solver, &rad, &report, cfg.series_order())
                        .ok()
                        .map(|c| c.kappa_empirical)
                } else {
                    None
                };
                Ok(SweepRow {
                    param,
                    radius: Some(rad.radius),
                    margins: report.margins.iter().map(|m| m.margin).collect(),
                    verdict: verdict_name(&report.verdict).to_string(),
                    kappa_star: report.kappa_star,
                    kappa_empirical,
                    error: None,
                })
            };
            attempt().unwrap_or_else(|e| SweepRow {
                param,
                radius: None,
                margins: vec![],
                verdict: "error".into(),
                kappa_star: None,
                kappa_empirical: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    let min_margins: Vec<f64> = rows
        .iter()
        .filter(|r| r.error.is_none() && !r.margins.is_empty())
        .map(|r| r.margins.iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    let margin_trend_monotone = min_margins.windows(2).all(|w| w[1] <= w[0] + 1e-9)
        || min_margins.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    let phase_boundary = rows
        .iter()
        .find(|r| r.verdict == "convergent")
        .map(|r| r.param);
    Ok(SweepSummary {
        parameter: sw.parameter.clone(),
        rows,
        margin_trend_monotone,
        phase_boundary,
    })
}

// ---------------------------------------------------------------------------
// JSON output with 17 significant digits.

pub fn to_json_17(value: &serde_json::Value) -> String {
    let mut s = String::new();
    write_json(value, &mut s, 0);
    s
}

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return "null".into();
    }
    if x == x.trunc() && x.abs() < 1e15 {
        // Keep integral floats compact (they are exact).
        return format!("{:.1}", x);
    }
    format!("{:.16e}", x)
}

fn write_json(v: &serde_json::Value, out: &mut String, indent: usize) {
    match v {
        serde_json::Value::Null => out.push_str("null"),
        serde_json::Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&fmt_f64(n.as_f64().unwrap()));
            }
        }
        serde_json::Value::String(s) => {
            out.push_str(&serde_json::to_string(s).unwrap());
        }
        serde_json::Value::Array(a) => {
            if a.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent + 1));
                write_json(item, out, indent + 1);
            }
            out.push('\n');
            out.push_str(&"  ".repeat(indent));
            out.push(']');
        }
        serde_json::Value::Object(m) => {
            if m.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            let sorted: BTreeMap<_, _> = m.iter().collect();
            for (i, (k, item)) in sorted.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent + 1));
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push_str(": ");
                write_json(item, out, indent + 1);
            }
            out.push('\n');
            out.push_str(&"  ".repeat(indent));
            out.push('}');
        }
    }
}

// ---------------------------------------------------------------------------
// Artifact files and caching.

pub fn scenario_hash(cfg: &ScenarioConfig) -> Result<String> {
    let canonical = to_json_17(&serde_json::to_value(cfg)?);
    let mut h = Sha256::new();
    h.update(LAB_VERSION.as_bytes());
    h.update(b"\0");
    h.update(canonical.as_bytes());
    Ok(format!("{:x}", h.finalize()))
}

pub fn cache_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("GREENLAB_CACHE_DIR") {
        return PathBuf::from(dir);
    }
    std::env::temp_dir().join("greenlab-cache")
}

fn artifact_files(out: &RunOutput) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let report_value = serde_json::to_value(out)?;
    // report.json carries the full run output minus bulky CSV payloads.
    let mut trimmed = report_value.clone();
    if let Some(o) = trimmed.as_object_mut() {
        o.remove("series_csv");
        o.remove("excursion_rows");
        o.remove("rho_rows");
    }
    files.push(("report.json".to_string(), to_json_17(&trimmed) + "\n"));
    if !out.excursion_rows.is_empty() {
        let np = (out.excursion_rows[0].len() - 1) / 3;
        let mut csv = String::from("r");
        for tag in ["e", "c", "s"] {
            for p in 0..np {
                csv.push_str(&format!(",{tag}_{p}"));
            }
        }
        csv.push('\n');
        for row in &out.excursion_rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        files.push(("excursions.csv".to_string(), csv));
    }
    if !out.rho_rows.is_empty() {
        files.push(("rho_curve.csv".to_string(), strip::rho_curve_csv(&out.rho_rows)));
    }
    if let Some(csv) = &out.series_csv {
        files.push(("series.csv".to_string(), csv.clone()));
    }
    Ok(files)
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs a scenario file end to end: parse, cache lookup, execute on miss,
/// emit artifacts into the output directory. Returns (output, cache_hit).
pub fn run_scenario(path: &Path, opts: &RunOptions) -> Result<(RunOutput, bool)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    let mut cfg = ScenarioConfig::parse(&text)?;
    if let Some(p) = opts.precision_override {
        cfg.numerics.precision_mode =
            Some(if p == Precision::DoubleDouble { "dd" } else { "double" }.to_string());
    }
    let hash = scenario_hash(&cfg)?;
    let out_dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("out"));
    fs::create_dir_all(&out_dir)?;

    let cache_entry = cache_dir().join(&hash);
    if !opts.no_cache {
        if let Some(files) = read_cache(&cache_entry) {
            for (name, content) in &files {
                write_atomic(&out_dir.join(name), content)?;
            }
            let mut out = RunOutput::default();
            out.scenario_hash = hash;
            return Ok((out, true));
        }
    }

    if let Some(threads) = opts.threads {
        // Build a scoped pool; ignore failure if a global pool exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let mut out = execute(&cfg)?;
    out.scenario_hash = hash.clone();
    let files = artifact_files(&out)?;
    for (name, content) in &files {
        write_atomic(&out_dir.join(name), content)?;
    }
    if !opts.no_cache {
        write_cache(&cache_entry, &files)?;
    }
    Ok((out, false))
}

/// Cache layout: <key>/<artifact files> plus `manifest` holding
/// "name sha256" lines; a checksum mismatch is treated as a miss.
fn read_cache(entry: &Path) -> Option<Vec<(String, String)>> {
    let manifest = fs::read_to_string(entry.join("manifest")).ok()?;
    let mut files = Vec::new();
    for line in manifest.lines() {
        let (name, want) = line.split_once(' ')?;
        let content = fs::read_to_string(entry.join(name)).ok()?;
        let got = format!("{:x}", Sha256::digest(content.as_bytes()));
        if got != want {
            return None; // CacheCorrupt: recompute.
        }
        files.push((name.to_string(), content));
    }
    Some(files)
}

fn write_cache(entry: &Path, files: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(entry)?;
    let mut manifest = String::new();
    for (name, content) in files {
        write_atomic(&entry.join(name), content)?;
        manifest.push_str(&format!(
            "{name} {:x}\n",
            Sha256::digest(content.as_bytes())
        ));
    }
    write_atomic(&entry.join("manifest"), &manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    // The cache tests mutate the GREENLAB_CACHE_DIR process environment;
    // serialize them.
    static ENV_LOCK: Mutex<()> = Mutex::new(());

    pub fn f2_scenario_text() -> String {
        r#"{
            "version": 1,
            "walk": {
                "factors": [
                    {"kind": "lattice", "rank": 1, "steps": [[[1], 0.5], [[-1], 0.5]]},
                    {"kind": "lattice", "rank": 1, "steps": [[[1], 0.5], [[-1], 0.5]]}
                ],
                "weights": [0.5, 0.5]
            },
            "tasks": {"radius": true},
            "numerics": {"seriesOrder": 512}
        }"#
        .to_string()
    }

    #[test]
    fn strict_schema_rejects_unknown_fields() {
        let bad = r#"{"version": 1, "walk": {"factors": [], "weights": [], "wieghts": []}}"#;
        assert!(ScenarioConfig::parse(bad).is_err());
        let bad2 = f2_scenario_text().replace("\"radius\"", "\"radiuss\"");
        assert!(ScenarioConfig::parse(&bad2).is_err());
    }

    #[test]
    fn series_order_validation() {
        let bad = f2_scenario_text().replace("512", "500");
        assert!(ScenarioConfig::parse(&bad).is_err());
        let bad = f2_scenario_text().replace("512", "128");
        assert!(ScenarioConfig::parse(&bad).is_err());
    }

    #[test]
    fn f2_radius_via_scenario() {
        let cfg = ScenarioConfig::parse(&f2_scenario_text()).unwrap();
        let out = execute(&cfg).unwrap();
        assert!((out.radius.unwrap() - 2.0 / 3f64.sqrt()).abs() < 1e-8);
        assert_eq!(out.boundary_type.as_deref(), Some("branch_point"));
        assert!(!out.excursion_rows.is_empty());
    }

    #[test]
    fn cache_roundtrip_and_idempotence() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var("GREENLAB_CACHE_DIR", dir.path().join("cache"));
        let scen = dir.path().join("scenario.json");
        fs::write(&scen, f2_scenario_text()).unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().join("out1")),
            ..Default::default()
        };
        let (_, hit1) = run_scenario(&scen, &opts).unwrap();
        assert!(!hit1);
        let report1 = fs::read_to_string(dir.path().join("out1/report.json")).unwrap();
        let opts2 = RunOptions {
            out_dir: Some(dir.path().join("out2")),
            ..Default::default()
        };
        let (_, hit2) = run_scenario(&scen, &opts2).unwrap();
        assert!(hit2);
        let report2 = fs::read_to_string(dir.path().join("out2/report.json")).unwrap();
        assert_eq!(report1, report2);
        // Disabled cache must reproduce the identical bytes.
        let opts3 = RunOptions {
            out_dir: Some(dir.path().join("out3")),
            no_cache: true,
            ..Default::default()
        };
        let (_, hit3) = run_scenario(&scen, &opts3).unwrap();
        assert!(!hit3);
        let report3 = fs::read_to_string(dir.path().join("out3/report.json")).unwrap();
        assert_eq!(report1, report3);
        std::env::remove_var("GREENLAB_CACHE_DIR");
    }

    #[test]
    fn corrupt_cache_recomputes() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var("GREENLAB_CACHE_DIR", dir.path().join("cache"));
        let scen = dir.path().join("scenario.json");
        fs::write(&scen, f2_scenario_text()).unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().join("out")),
            ..Default::default()
        };
        let (out, _) = run_scenario(&scen, &opts).unwrap();
        // Corrupt one cached artifact.
        let entry = cache_dir().join(&out.scenario_hash);
        let victim = entry.join("report.json");
        fs::write(&victim, "garbage").unwrap();
        let (_, hit) = run_scenario(&scen, &opts).unwrap();
        assert!(!hit, "corrupt cache must be treated as a miss");
        std::env::remove_var("GREENLAB_CACHE_DIR");
    }

    #[test]
    fn parameter_path_addressing() {
        let cfg = ScenarioConfig::parse(&f2_scenario_text()).unwrap();
        let mut v = serde_json::to_value(&cfg).unwrap();
        set_parameter(&mut v, "walk.weights[0]", 0.7).unwrap();
        assert_eq!(v["walk"]["weights"][0].as_f64().unwrap(), 0.7);
        set_parameter(&mut v, "walk.laziness", 0.2).unwrap();
        assert_eq!(v["walk"]["laziness"].as_f64().unwrap(), 0.2);
        set_parameter(&mut v, "walk.factors[1].steps[0][1]", 0.25).unwrap();
        assert_eq!(
            v["walk"]["factors"][1]["steps"][0][1].as_f64().unwrap(),
            0.25
        );
        assert!(set_parameter(&mut v, "walk.nonsense", 1.0).is_err());
        assert!(set_parameter(&mut v, "walk.factors[0].kind", 1.0).is_err());
    }

    #[test]
    fn seventeen_digit_floats() {
        let v = serde_json::json!({"x": 0.1, "y": 3, "z": [1.5, 2.0e-300]});
        let s = to_json_17(&v);
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        assert!(s.contains("\"y\": 3"), "{s}");
        assert!(s.contains("2.0000000000000001e-300"), "{s}");
    }

    #[test]
    fn lazification_sweep_is_verdict_constant() {
        let text = f2_scenario_text().replace(
            r#""tasks": {"radius": true}"#,
            r#""tasks": {"sweep": {"parameter": "walk.laziness", "grid": [0.05, 0.15, 0.25]}}"#,
        );
        let cfg = ScenarioConfig::parse(&text).unwrap();
        let out = execute(&cfg).unwrap();
        let sweep = out.sweep.unwrap();
        assert_eq!(sweep.rows.len(), 3);
        for row in &sweep.rows {
            assert_eq!(
                row.verdict, "divergent_spectrally_positive_recurrent",
                "{row:?}"
            );
        }
    }
}
