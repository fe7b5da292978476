//! Walk classification: Green-moment functionals I^(k) and their per-factor
//! counterparts J^(k)_p, boundary-ladder finiteness tests, the
//! convergent/divergent verdict, predicted vs empirical local-limit
//! exponents, and inequality monitors.

use crate::excursion::{ExcursionError, NumericExcursions, RadiusReport, Solver};
use crate::group::WalkSpec;
use crate::lattice::GreenValue;
use crate::series::{coefficient_exponent_fit, SingularityModel};
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("boundary model fits are indistinguishable; both hypotheses reported")]
    InconclusiveClassification,
    #[error(transparent)]
    Excursion(#[from] ExcursionError),
    #[error(transparent)]
    Series(#[from] crate::series::SeriesError),
    #[error(transparent)]
    Strip(#[from] crate::strip::StripError),
}

/// A functional value: a finite number with an error bound, or a structured
/// divergence carrying its singularity model. Finite values serialize as
/// plain JSON numbers.
#[derive(Debug, Clone)]
pub enum Value {
    Finite { value: f64, err: f64 },
    Divergent { model: SingularityModel, amplitude: f64 },
}

impl Value {
    pub fn finite(&self) -> Option<f64> {
        match self {
            Value::Finite { value, .. } => Some(*value),
            Value::Divergent { .. } => None,
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Finite { value, .. } => s.serialize_f64(*value),
            Value::Divergent { model, amplitude } => {
                let mut m = s.serialize_map(Some(3))?;
                m.serialize_entry("divergent", &true)?;
                m.serialize_entry("model", &model_name(model))?;
                m.serialize_entry("amplitude", amplitude)?;
                m.end()
            }
        }
    }
}

pub fn model_name(m: &SingularityModel) -> String {
    match m {
        SingularityModel::Bounded => "bounded".into(),
        SingularityModel::InvSqrt => "inv_sqrt".into(),
        SingularityModel::Log => "log".into(),
        SingularityModel::Power(b) => format!("power({b})"),
    }
}

/// I^(k)(r) for k = 1..=kMax together with the per-factor J^(k)_p(r).
#[derive(Debug, Clone, Serialize)]
pub struct Functionals {
    pub r: f64,
    /// i[k-1] = I^(k)(r).
    pub i: Vec<Value>,
    /// j[p][k-1] = J^(k)_p(r).
    pub j: Vec<Vec<Value>>,
}

/// Combines Green derivatives g[0..=k] (value, err) into the k-th Green
/// moment sum_n binom(n+k, k) p_n r^n via the derivative cascade.
fn moment_from_derivs(g: &[(f64, f64)], r: f64, k: usize) -> Value {
    // Coefficients of G, rG', r^2 G''/2!, r^3 G'''/3! in I^(k):
    // I^(1) = G + rG'
    // I^(2) = G + 2rG' + r^2 G''/2
    // I^(3) = G + 3rG' + 3 r^2 G''/2 + r^3 G'''/6
    let coef: [[f64; 4]; 3] = [
        [1.0, 1.0, 0.0, 0.0],
        [1.0, 2.0, 1.0, 0.0],
        [1.0, 3.0, 3.0, 1.0],
    ];
    const FACT: [f64; 4] = [1.0, 1.0, 2.0, 6.0];
    let c = &coef[k - 1];
    let mut value = 0.0;
    let mut err = 0.0;
    for (idx, &(v, e)) in g.iter().enumerate().take(k + 1) {
        let w = c[idx] * r.powi(idx as i32) / FACT[idx];
        value += w * v;
        err += w.abs() * e;
    }
    Value::Finite { value, err }
}

/// Same cascade on GreenValue derivative lists (t-derivatives at t = 1);
/// divergence of any contributing derivative makes the moment divergent.
fn moment_from_green_values(g: &[GreenValue], t: f64, k: usize) -> Value {
    let coef: [[f64; 4]; 3] = [
        [1.0, 1.0, 0.0, 0.0],
        [1.0, 2.0, 1.0, 0.0],
        [1.0, 3.0, 3.0, 1.0],
    ];
    const FACT: [f64; 4] = [1.0, 1.0, 2.0, 6.0];
    let c = &coef[k - 1];
    let mut value = 0.0;
    let mut err = 0.0;
    for (idx, gv) in g.iter().enumerate().take(k + 1) {
        let w = c[idx] * t.powi(idx as i32) / FACT[idx];
        match gv {
            GreenValue::Finite { value: v, err: e } => {
                value += w * v;
                err += w.abs() * e;
            }
            GreenValue::Divergent { model } => {
                return Value::Divergent { model: model.clone(), amplitude: f64::NAN };
            }
        }
    }
    Value::Finite { value, err }
}

/// Computes I^(1..kMax)(r) and J^(1..kMax)_p(r) at a point r <= R, reusing
/// an existing fixed-point solution when provided.
pub fn compute_functionals_with(
    solver: &Solver,
    r: f64,
    k_max: usize,
    sol: &NumericExcursions,
) -> Result<Functionals, ClassifyError> {
    assert!((1..=3).contains(&k_max));
    let g = solver.green_derivatives_with(r, sol, k_max)?;
    let i = (1..=k_max).map(|k| moment_from_derivs(&g, r, k)).collect();
    let mut j = Vec::with_capacity(solver.walk.factors.len());
    for p in 0..solver.walk.factors.len() {
        let h = solver.factor_green_t(p, r, 1.0, k_max, sol)?;
        j.push((1..=k_max).map(|k| moment_from_green_values(&h, 1.0, k)).collect());
    }
    Ok(Functionals { r, i, j })
}

pub fn compute_functionals(w: &WalkSpec, r: f64, k_max: usize) -> Result<Functionals, ClassifyError> {
    let solver = Solver::new(w)?;
    let sol = solver.solve_numeric(r, None)?;
    compute_functionals_with(&solver, r, k_max, &sol)
}

/// Boundary-ladder radii r_i = R(1 - eps_i), eps geometric from 1e-2 down
/// to 1e-8 (25 points spanning 6 decades).
pub fn boundary_ladder(radius: f64) -> Vec<f64> {
    (0..=24)
        .map(|i| radius * (1.0 - 10f64.powf(-2.0 - 0.25 * i as f64)))
        .collect()
}

/// Fits a boundary ladder of values and decides bounded-vs-growing with the
/// residual-advantage rule: "finite" requires the bounded plateau to win
/// with residual advantage >= 3x over every growing model.
#[derive(Debug, Clone, Serialize)]
pub struct LadderDecision {
    pub finite: bool,
    pub model: String,
    pub amplitude: f64,
    pub advantage: f64,
    pub indistinguishable: bool,
}

/// Two-parameter least squares of the ladder values against
/// `amp * shape(R - r) + offset`; returns (amp, offset, normalized rms).
fn shape_fit(samples: &[(f64, f64)], radius: f64, shape: impl Fn(f64) -> f64) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(r, f) in samples {
        let x = shape(radius - r);
        sx += x;
        sy += f;
        sxx += x * x;
        sxy += x * f;
    }
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return (0.0, sy / n, f64::INFINITY);
    }
    let amp = (n * sxy - sx * sy) / det;
    let off = (sy - amp * sx) / n;
    let scale = samples.iter().map(|&(_, f)| f.abs()).sum::<f64>() / n;
    let mut ss = 0.0;
    for &(r, f) in samples {
        let e = f - (amp * shape(radius - r) + off);
        ss += e * e;
    }
    let rms = (ss / n).sqrt() / scale.max(1e-300);
    (amp, off, rms)
}

/// Each candidate is fitted with its leading shape plus a free offset (the
/// bounded model's "shape" is the vanishing sqrt correction, so its offset
/// is the finite limit). The bounded model must win with residual
/// advantage >= 3x for a "finite" verdict.
pub fn decide_ladder(samples: &[(f64, f64)], radius: f64) -> Result<LadderDecision, ClassifyError> {
    if samples.len() < 12 {
        return Err(ClassifyError::Series(crate::series::SeriesError::NonMonotoneSamples));
    }
    // Prefer the deepest rungs, where subleading corrections are smallest;
    // fall back to the full ladder when too few survive.
    let deep: Vec<(f64, f64)> = samples
        .iter()
        .copied()
        .filter(|&(r, _)| (radius - r) / radius <= 1.0001e-4)
        .collect();
    let samples = if deep.len() >= 12 { &deep[..] } else { samples };
    // Bounded plateaus can approach their limit with either a sqrt or an
    // eps*log(eps) leading correction depending on the degeneracy parity;
    // either shape counts as the bounded model.
    let (_, limit_sq, res_bounded_sq) = shape_fit(samples, radius, |eps| eps.sqrt());
    let (_, limit_ll, res_bounded_ll) = shape_fit(samples, radius, |eps| -eps * eps.ln());
    let (limit, res_bounded) = if res_bounded_sq <= res_bounded_ll {
        (limit_sq, res_bounded_sq)
    } else {
        (limit_ll, res_bounded_ll)
    };
    let (amp_is, _, res_invsqrt) = shape_fit(samples, radius, |eps| eps.powf(-0.5));
    let (amp_log, _, res_log) = shape_fit(samples, radius, |eps| -eps.ln());
    let fits = [
        (SingularityModel::Bounded, limit, res_bounded),
        (SingularityModel::InvSqrt, amp_is, res_invsqrt),
        (SingularityModel::Log, amp_log, res_log),
    ];
    let best = fits
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .unwrap()
        .clone();
    let runner_up = fits
        .iter()
        .filter(|f| f.0 != best.0)
        .map(|f| f.2)
        .fold(f64::INFINITY, f64::min);
    let is_bounded = matches!(best.0, SingularityModel::Bounded);
    let advantage = if is_bounded {
        runner_up / best.2.max(1e-300)
    } else {
        res_bounded / best.2.max(1e-300)
    };
    Ok(LadderDecision {
        finite: is_bounded && advantage >= 3.0,
        model: model_name(&best.0),
        amplitude: best.1,
        advantage,
        indistinguishable: runner_up < 2.0 * best.2,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorMargin {
    pub factor: usize,
    pub rank: usize,
    pub margin: f64,
    pub uncertainty: f64,
    pub degenerate: bool,
    pub near_critical: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    /// Decision data for the I^(1) boundary ladder.
    pub i1_ladder: LadderDecision,
    /// Bounded-plateau check of J^(2)_p along the ladder, per factor
    /// (positive-recurrence consistency for divergent walks).
    pub j2_bounded: Vec<bool>,
    /// Set when a degeneracy with rank < 5 was detected; such a
    /// classification is never valid and signals insufficient precision.
    pub rank_floor_violation: bool,
    /// Relative agreement of the located radius with the series-coefficient
    /// estimate.
    pub radius_cross_check_rel: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryModelReport {
    /// Derivative order j whose boundary behavior is fitted.
    pub order: usize,
    pub model: String,
    pub amplitude: f64,
    pub advantage: f64,
    pub indistinguishable: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Convergent,
    DivergentSpectrallyPositiveRecurrent,
    NearCritical,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    #[serde(rename = "R_mu")]
    pub radius: f64,
    pub radius_accuracy: f64,
    pub boundary_type: String,
    pub margins: Vec<FactorMargin>,
    /// Rank of spectral degeneracy (minimum rank over degenerate factors).
    pub d: Option<usize>,
    pub verdict: Verdict,
    pub kappa_star: Option<f64>,
    pub kappa_empirical: Option<f64>,
    pub kappa_uncertainty: Option<f64>,
    pub boundary_model: Option<BoundaryModelReport>,
    pub diagnostics: Diagnostics,
}

/// Full classification with an already-built solver and located radius.
pub fn classify_with(solver: &Solver, rad: &RadiusReport) -> Result<Report, ClassifyError> {
    let radius = rad.radius;
    let np = solver.walk.factors.len();
    // Functionals along the boundary ladder, warm-started from below.
    let ladder = boundary_ladder(radius);
    let mut warm: Option<Vec<f64>> = None;
    let mut i1 = Vec::with_capacity(ladder.len());
    let mut g_derivs: Vec<(f64, Vec<(f64, f64)>)> = Vec::with_capacity(ladder.len());
    let mut j2: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(ladder.len()); np];
    for &r in &ladder {
        // The deepest rungs may fail at a degeneracy contact (the inner
        // variable grazes its own boundary); keep what converged.
        let sol = match solver.solve_numeric(r, warm.as_deref()) {
            Ok(s) => s,
            Err(e) if i1.len() >= 13 => {
                let _ = e;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let f = match compute_functionals_with(solver, r, 3, &sol) {
            Ok(f) => f,
            Err(_) if i1.len() >= 13 => break,
            Err(e) => return Err(e),
        };
        if let Some(v) = f.i[0].finite() {
            i1.push((r, v));
        }
        for p in 0..np {
            if let Some(v) = f.j[p][1].finite() {
                j2[p].push((r, v));
            }
        }
        g_derivs.push((r, solver.green_derivatives_with(r, &sol, 3)?));
        warm = Some(sol.e);
    }
    let i1_decision = decide_ladder(&i1, radius)?;
    let j2_bounded: Vec<bool> = (0..np)
        .map(|p| {
            decide_ladder(&j2[p], radius)
                .map(|d| d.finite)
                .unwrap_or(false)
        })
        .collect();

    // Per-factor degeneracy margins.
    let mut margins = Vec::with_capacity(np);
    for p in 0..np {
        let v = crate::strip::degeneracy_ladder(solver, p, radius)?;
        margins.push(FactorMargin {
            factor: p,
            rank: solver.walk.factors[p].rank(),
            margin: v.margin,
            uncertainty: v.uncertainty,
            degenerate: v.degenerate,
            near_critical: v.near_critical,
        });
    }
    let degenerate_ranks: Vec<usize> = margins
        .iter()
        .filter(|m| m.degenerate)
        .map(|m| m.rank)
        .collect();
    let d = degenerate_ranks.iter().copied().min();
    let rank_floor_violation = d.map(|d| d < 5).unwrap_or(false);

    // Verdict.
    let near = i1_decision.indistinguishable
        || (!i1_decision.finite && i1_decision.advantage < 3.0)
        || margins.iter().any(|m| m.near_critical)
        || rank_floor_violation;
    let verdict = if i1_decision.finite && d.is_some() && !rank_floor_violation {
        Verdict::Convergent
    } else if near {
        Verdict::NearCritical
    } else {
        Verdict::DivergentSpectrallyPositiveRecurrent
    };
    let kappa_star = match verdict {
        Verdict::Convergent => Some(d.unwrap() as f64 / 2.0),
        Verdict::DivergentSpectrallyPositiveRecurrent => Some(1.5),
        Verdict::NearCritical => None,
    };

    // Boundary model of G^(j): j = ceil(d/2) - 1 with the effective rank 3
    // in the non-degenerate regime (so j = 1, the first derivative).
    let d_eff = match verdict {
        Verdict::Convergent => d.unwrap(),
        _ => 3,
    };
    let j_order = (d_eff + 1) / 2 - 1;
    let gj: Vec<(f64, f64)> = g_derivs
        .iter()
        .map(|(r, g)| (*r, g[j_order].0))
        .collect();
    let boundary_model = decide_ladder(&gj, radius).ok().map(|dec| BoundaryModelReport {
        order: j_order,
        model: dec.model,
        amplitude: dec.amplitude,
        advantage: dec.advantage,
        indistinguishable: dec.indistinguishable,
    });

    Ok(Report {
        radius,
        radius_accuracy: rad.accuracy,
        boundary_type: match &rad.boundary {
            crate::excursion::BoundaryType::BranchPoint => "branch_point".into(),
            crate::excursion::BoundaryType::DegeneracyContact { .. } => {
                "degeneracy_contact".into()
            }
        },
        margins,
        d,
        verdict,
        kappa_star,
        kappa_empirical: None,
        kappa_uncertainty: None,
        boundary_model,
        diagnostics: Diagnostics {
            i1_ladder: i1_decision,
            j2_bounded,
            rank_floor_violation,
            radius_cross_check_rel: None,
        },
    })
}

pub fn classify_walk(w: &WalkSpec) -> Result<Report, ClassifyError> {
    let solver = Solver::new(w)?;
    let rad = solver.locate_radius()?;
    classify_with(&solver, &rad)
}

/// Empirical local-limit exponent from series coefficients vs the predicted
/// one; also fits the boundary model of G^(j) and checks it against the
/// parity of d (inv_sqrt for odd d, log for even d).
#[derive(Debug, Clone, Serialize)]
pub struct ExponentCheck {
    pub kappa_empirical: f64,
    pub kappa_uncertainty: f64,
    pub kappa_star: f64,
    pub agreement: f64,
    pub model_matches: Option<bool>,
}

pub fn verify_exponent(w: &WalkSpec, n: usize) -> Result<ExponentCheck, ClassifyError> {
    let solver = Solver::with_order(w, n.max(4096))?;
    let rad = solver.locate_radius()?;
    let report = classify_with(&solver, &rad)?;
    verify_exponent_with(&solver, &rad, &report, n)
}

pub fn verify_exponent_with(
    solver: &Solver,
    rad: &RadiusReport,
    report: &Report,
    n: usize,
) -> Result<ExponentCheck, ClassifyError> {
    let series = solver.green_series(n, rad.radius)?;
    let (kappa, unc) = coefficient_exponent_fit(&series, rad.radius)?;
    let kappa_star = report.kappa_star.unwrap_or(f64::NAN);
    let model_matches = report.boundary_model.as_ref().and_then(|bm| {
        let d_eff = report.d.unwrap_or(3);
        let expected = if d_eff % 2 == 1 { "inv_sqrt" } else { "log" };
        if bm.indistinguishable {
            None
        } else {
            Some(bm.model == expected)
        }
    });
    Ok(ExponentCheck {
        kappa_empirical: kappa,
        kappa_uncertainty: unc,
        kappa_star,
        agreement: (kappa - kappa_star).abs(),
        model_matches,
    })
}

/// One row of the inequality-monitor grid.
#[derive(Debug, Clone, Serialize)]
pub struct MonitorRow {
    pub r: f64,
    pub i: Vec<f64>,
    pub j: Vec<Vec<f64>>,
    /// I^(1)(r)^4 J^(3)(r) / I^(3)(r) with J^(3) = sum_p J^(3)_p.
    pub cubic_ratio: f64,
    /// Worst violation of J^(k)_p <= I^(k) over p, k (negative slack).
    pub worst_subset_slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonitorReport {
    pub rows: Vec<MonitorRow>,
    pub max_cubic_ratio: f64,
    pub subset_violations: usize,
}

/// Evaluates the functionals over an increasing r-grid (defaulting to a
/// geometric approach of 0.999 R) and records the boundedness monitors.
pub fn ij_ratio_monitor(
    solver: &Solver,
    radius: f64,
    grid: Option<&[f64]>,
) -> Result<MonitorReport, ClassifyError> {
    let default_grid: Vec<f64> = (0..=12)
        .map(|i| radius * (1.0 - 0.999 * 10f64.powf(-0.25 * i as f64)))
        .collect();
    let grid: Vec<f64> = grid.map(|g| g.to_vec()).unwrap_or(default_grid);
    let mut rows = Vec::with_capacity(grid.len());
    let mut warm: Option<Vec<f64>> = None;
    let mut max_ratio = 0.0f64;
    let mut violations = 0usize;
    for &r in &grid {
        let sol = solver.solve_numeric(r, warm.as_deref())?;
        let f = compute_functionals_with(solver, r, 3, &sol)?;
        warm = Some(sol.e);
        let i: Vec<f64> = f.i.iter().map(|v| v.finite().unwrap_or(f64::INFINITY)).collect();
        let j: Vec<Vec<f64>> = f
            .j
            .iter()
            .map(|per| per.iter().map(|v| v.finite().unwrap_or(f64::INFINITY)).collect())
            .collect();
        let j3_total: f64 = j.iter().map(|per: &Vec<f64>| per[2]).sum();
        let cubic_ratio = i[0].powi(4) * j3_total / i[2];
        let mut worst = f64::INFINITY;
        for per in &j {
            for k in 0..3 {
                let slack = i[k] - per[k];
                worst = worst.min(slack + 1e-9 * i[k].abs());
                if slack < -1e-9 * i[k].abs() {
                    violations += 1;
                }
            }
        }
        max_ratio = max_ratio.max(cubic_ratio);
        rows.push(MonitorRow { r, i, j, cubic_ratio, worst_subset_slack: worst });
    }
    Ok(MonitorReport { rows, max_cubic_ratio: max_ratio, subset_violations: violations })
}
