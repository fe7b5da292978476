//! The free-product excursion fixed-point system.
//!
//! For a walk mu = beta_tot * delta_e + sum_p a_p * mu_p (beta_tot collects
//! scenario laziness plus factor identity mass; mu_p the normalized
//! nontrivial factor steps), excursions into the branch of factor p see an
//! effective lazy walk c_p * delta_0 + r * a_p * mu_p on the factor, where
//! c_p = r*beta_tot + sum_{q != p} e_q and e_q is the r-weighted mass of a
//! completed excursion into branch q. Folding the laziness into the factor
//! Green function gives the closed scalar system
//!
//!   e_p = (1 - c_p) * (1 - 1 / G_p(s_p)),   s_p = r * a_p / (1 - c_p),
//!
//! with G_p the diagonal factor Green function. The ambient Green function
//! is then G(e,e|r) = 1 / (1 - r*beta_tot - sum_p e_p), and equivalently
//! (1 - c_p)^{-1} G_p(s_p) for every p.

use crate::group::{FactorElem, FactorKind, FactorSpec, WalkSpec};
use crate::lattice::{GreenValue, LatticeCache, LatticeError};
use crate::series::{radius_estimate, Series, SeriesError, SingularityModel};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExcursionError {
    #[error("no fixed point at r = {r}: residual {residual:.3e} after {iterations} iterations")]
    NoFixedPoint { r: f64, residual: f64, iterations: usize },
    #[error("spectral degeneracy surface touched at r = {r} by factors {factors:?}")]
    BoundaryContact { r: f64, factors: Vec<usize> },
    #[error("functional-equation radius {equation} and coefficient radius {coefficients} disagree")]
    CrossCheckFailed { equation: f64, coefficients: f64 },
    #[error("first-return kernel disagrees with brute force at {element:?}: {analytic} vs {brute} (tail bound {tail:.3e})")]
    ValidationFailed { element: FactorElem, analytic: f64, brute: f64, tail: f64 },
    #[error("boundary value requires a divergence model")]
    ModelRequired,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Group(#[from] crate::group::GroupError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Degree-3 truncated Taylor jet: value and derivative coefficients
/// f, f'/1!, f''/2!, f'''/3!.
#[derive(Debug, Clone, Copy)]
pub struct Jet3(pub [f64; 4]);

impl Jet3 {
    pub fn constant(v: f64) -> Self {
        Jet3([v, 0.0, 0.0, 0.0])
    }

    /// The variable itself: value v, unit first derivative.
    pub fn variable(v: f64) -> Self {
        Jet3([v, 1.0, 0.0, 0.0])
    }

    pub fn add(self, o: Jet3) -> Jet3 {
        Jet3([
            self.0[0] + o.0[0],
            self.0[1] + o.0[1],
            self.0[2] + o.0[2],
            self.0[3] + o.0[3],
        ])
    }

    pub fn scale(self, k: f64) -> Jet3 {
        Jet3([self.0[0] * k, self.0[1] * k, self.0[2] * k, self.0[3] * k])
    }

    pub fn mul(self, o: Jet3) -> Jet3 {
        let a = self.0;
        let b = o.0;
        Jet3([
            a[0] * b[0],
            a[0] * b[1] + a[1] * b[0],
            a[0] * b[2] + a[1] * b[1] + a[2] * b[0],
            a[0] * b[3] + a[1] * b[2] + a[2] * b[1] + a[3] * b[0],
        ])
    }

    pub fn recip(self) -> Jet3 {
        let a = self.0;
        let i0 = 1.0 / a[0];
        let i1 = -a[1] * i0 * i0;
        let i2 = -(a[2] * i0 + a[1] * i1) * i0;
        let i3 = -(a[3] * i0 + a[2] * i1 + a[1] * i2) * i0;
        Jet3([i0, i1, i2, i3])
    }

    /// Composition g(f) given the Taylor coefficients of g at f.value.
    /// `g` holds [g, g', g''/2, g'''/6] evaluated at self.0[0].
    pub fn compose(self, g: [f64; 4]) -> Jet3 {
        let u1 = self.0[1];
        let u2 = self.0[2];
        let u3 = self.0[3];
        Jet3([
            g[0],
            g[1] * u1,
            g[1] * u2 + g[2] * u1 * u1,
            g[1] * u3 + 2.0 * g[2] * u1 * u2 + g[3] * u1 * u1 * u1,
        ])
    }

    /// k-th derivative (not Taylor coefficient).
    pub fn deriv(self, k: usize) -> f64 {
        const FACT: [f64; 4] = [1.0, 1.0, 2.0, 6.0];
        self.0[k] * FACT[k]
    }
}

/// Green evaluator for a single factor, derivative orders 0..=3.
pub enum FactorGreen {
    Lattice(LatticeCache),
    Finite(FiniteCache),
}

/// Finite factor: the convolution operator of the normalized step measure
/// as an explicit matrix; Green values via linear solves.
pub struct FiniteCache {
    /// m x m matrix: M[(i,j)] = weight of moving from j to i in one
    /// normalized nontrivial step, i.e. mu(i * j^{-1}).
    pub matrix: DMatrix<f64>,
}

impl FiniteCache {
    pub fn new(spec: &FactorSpec, step: &[(FactorElem, f64)]) -> Self {
        let m = spec.order().expect("finite factor");
        let mut matrix = DMatrix::zeros(m, m);
        for j in 0..m {
            for (x, w) in step {
                let xi = match x {
                    FactorElem::Finite(i) => *i,
                    _ => panic!("finite factor with lattice step"),
                };
                let target = match &spec.kind {
                    FactorKind::Finite { table } => table[xi][j],
                    _ => unreachable!(),
                };
                matrix[(target, j)] += w;
            }
        }
        FiniteCache { matrix }
    }

    /// G^(j)(x, 0 | s) = j! [M^j (I - sM)^{-(j+1)}]_{x,0} for j <= max_deriv.
    fn green_point(&self, s: f64, x: usize, max_deriv: usize) -> Vec<GreenValue> {
        let m = self.matrix.nrows();
        if s >= 1.0 {
            // Stochastic M: (I - M) is singular, simple pole.
            return (0..=max_deriv)
                .map(|_| GreenValue::Divergent { model: SingularityModel::Power(1.0) })
                .collect();
        }
        let a = DMatrix::identity(m, m) - self.matrix.clone() * s;
        let lu = a.lu();
        let mut v = DVector::zeros(m);
        v[0] = 1.0;
        let mut out = Vec::with_capacity(max_deriv + 1);
        let mut fact = 1.0;
        for j in 0..=max_deriv {
            if j > 0 {
                v = &self.matrix * v;
                fact *= j as f64;
            }
            v = lu.solve(&v).expect("finite Green solve failed");
            out.push(GreenValue::Finite { value: fact * v[x], err: 1e-14 * fact * v[x].abs() });
        }
        out
    }

    /// Return sequence p_n(0) for the normalized step measure.
    fn return_series(&self, n_max: usize) -> Vec<f64> {
        let m = self.matrix.nrows();
        let mut v = DVector::zeros(m);
        v[0] = 1.0;
        let mut out = Vec::with_capacity(n_max + 1);
        out.push(1.0);
        for _ in 1..=n_max {
            v = &self.matrix * v;
            out.push(v[0]);
        }
        out
    }
}

impl FactorGreen {
    fn green_diag(&self, s: f64, max_deriv: usize) -> Result<Vec<GreenValue>, ExcursionError> {
        match self {
            FactorGreen::Lattice(c) => {
                let d = c.asym.rank;
                Ok(c.green_eval(s, &vec![0; d], max_deriv)?)
            }
            FactorGreen::Finite(c) => Ok(c.green_point(s, 0, max_deriv)),
        }
    }

    fn return_series(&self, n_max: usize) -> Result<Vec<f64>, ExcursionError> {
        match self {
            FactorGreen::Lattice(c) => {
                let spec = c.spec.clone();
                Ok(crate::lattice::lattice_return_series(&spec, n_max)?.coeffs)
            }
            FactorGreen::Finite(c) => Ok(c.return_series(n_max)),
        }
    }
}

/// One numeric-mode solution of the excursion system.
#[derive(Debug, Clone)]
pub struct NumericExcursions {
    pub r: f64,
    pub e: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    /// Ambient Green value G(e,e|r).
    pub green: f64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryType {
    BranchPoint,
    DegeneracyContact { factors: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct RadiusReport {
    pub radius: f64,
    pub boundary: BoundaryType,
    pub accuracy: f64,
}

pub struct Solver {
    pub walk: WalkSpec,
    pub factors: Vec<FactorGreen>,
    /// Identity mass of the ambient measure.
    pub beta_tot: f64,
    /// Effective nontrivial weight per factor.
    pub a: Vec<f64>,
    /// Lattice Green truncation order for numeric evaluation.
    pub n_exact: usize,
}

const FEAS_TOL: f64 = 1e-12;

impl Solver {
    pub fn new(walk: &WalkSpec) -> Result<Self, ExcursionError> {
        Self::with_order(walk, 4096)
    }

    pub fn with_order(walk: &WalkSpec, n_exact: usize) -> Result<Self, ExcursionError> {
        walk.validate()?;
        let beta_tot = walk.identity_mass();
        let mut factors = Vec::new();
        let mut a = Vec::new();
        for (p, f) in walk.factors.iter().enumerate() {
            a.push(walk.nontrivial_weight(p));
            let step = walk.normalized_factor_step(p);
            match &f.kind {
                FactorKind::Lattice { rank } => {
                    let norm = FactorSpec {
                        id: f.id,
                        kind: FactorKind::Lattice { rank: *rank },
                        step,
                    };
                    factors.push(FactorGreen::Lattice(LatticeCache::new(&norm, n_exact)?));
                }
                FactorKind::Finite { .. } => {
                    factors.push(FactorGreen::Finite(FiniteCache::new(f, &step)));
                }
            }
        }
        Ok(Solver { walk: walk.clone(), factors, beta_tot, a, n_exact })
    }

    fn p(&self) -> usize {
        self.factors.len()
    }

    fn c_of(&self, r: f64, e: &[f64], p: usize) -> f64 {
        r * self.beta_tot + e.iter().enumerate().filter(|(q, _)| *q != p).map(|(_, v)| v).sum::<f64>()
    }

    /// One evaluation of the fixed-point map and its Jacobian data.
    /// Returns (phi_p, s_p, c_p, a_pq-coefficient) per factor, where the
    /// Jacobian of the map w.r.t. e_q (q != p) is the same scalar for all q.
    fn map_eval(
        &self,
        r: f64,
        e: &[f64],
        want_jac: bool,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), ExcursionError> {
        let np = self.p();
        let mut phi = vec![0.0; np];
        let mut s = vec![0.0; np];
        let mut c = vec![0.0; np];
        let mut jac = vec![0.0; np];
        for p in 0..np {
            c[p] = self.c_of(r, e, p);
            if c[p] >= 1.0 {
                return Err(ExcursionError::BoundaryContact { r, factors: vec![p] });
            }
            s[p] = r * self.a[p] / (1.0 - c[p]);
            if s[p] > 1.0 + FEAS_TOL {
                return Err(ExcursionError::BoundaryContact { r, factors: vec![p] });
            }
            let sp = s[p].min(1.0);
            let g = self.factors[p].green_diag(sp, if want_jac { 1 } else { 0 })?;
            let g0 = match &g[0] {
                GreenValue::Finite { value, .. } => *value,
                GreenValue::Divergent { .. } => f64::INFINITY,
            };
            phi[p] = (1.0 - c[p]) * (1.0 - 1.0 / g0);
            if want_jac {
                let g1 = match &g[1] {
                    GreenValue::Finite { value, .. } => *value,
                    GreenValue::Divergent { .. } => f64::INFINITY,
                };
                // d phi_p / d e_q (q != p) via d c_p / d e_q = 1.
                jac[p] = -(1.0 - 1.0 / g0) + sp * g1 / (g0 * g0);
            }
        }
        Ok((phi, s, c, jac))
    }

    /// Solves the system at numeric r: monotone Picard from below (or a
    /// warm start known to lie below the fixed point), then damped Newton.
    pub fn solve_numeric(
        &self,
        r: f64,
        warm: Option<&[f64]>,
    ) -> Result<NumericExcursions, ExcursionError> {
        let np = self.p();
        let mut e = warm.map(|w| w.to_vec()).unwrap_or_else(|| vec![0.0; np]);
        let mut iterations = 0usize;
        let mut residual = f64::INFINITY;
        // Phase 1: Picard. From below, iterates increase monotonically
        // toward the least fixed point; infeasibility on the way up means
        // r lies beyond the radius (or exactly at degeneracy contact).
        for _ in 0..2000 {
            iterations += 1;
            let (phi, _s, _c, _) = self.map_eval(r, &e, false)?;
            let mut delta = 0.0f64;
            for p in 0..np {
                delta = delta.max((phi[p] - e[p]).abs());
                e[p] = phi[p];
            }
            residual = delta;
            if delta < 1e-15 {
                break;
            }
        }
        // Phase 2: Newton polish with Armijo backtracking.
        if residual > 1e-15 {
            for _ in 0..200 {
                iterations += 1;
                let (phi, _s, _c, jac) = self.map_eval(r, &e, true)?;
                let res: Vec<f64> = (0..np).map(|p| e[p] - phi[p]).collect();
                let rnorm = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                residual = rnorm;
                if rnorm < 1e-15 {
                    break;
                }
                // J = I - A with A_pq = jac[p] for q != p, 0 on the diagonal.
                let mut j = DMatrix::identity(np, np);
                for p in 0..np {
                    for q in 0..np {
                        if q != p {
                            j[(p, q)] = -jac[p];
                        }
                    }
                }
                let rhs = DVector::from_iterator(np, res.iter().map(|v| -v));
                let step = match j.lu().solve(&rhs) {
                    Some(s) => s,
                    None => break,
                };
                let mut t = 1.0;
                let mut improved = false;
                for _ in 0..40 {
                    let trial: Vec<f64> = (0..np).map(|p| (e[p] + t * step[p]).max(0.0)).collect();
                    match self.map_eval(r, &trial, false) {
                        Ok((phi_t, _, _, _)) => {
                            let rn = (0..np)
                                .map(|p| (trial[p] - phi_t[p]).abs())
                                .fold(0.0f64, f64::max);
                            if rn < rnorm * (1.0 - 0.25 * t) || rn < 1e-15 {
                                e = trial;
                                improved = true;
                                break;
                            }
                        }
                        Err(_) => {}
                    }
                    t *= 0.5;
                }
                if !improved {
                    break;
                }
            }
        }
        if residual > 1e-13 {
            return Err(ExcursionError::NoFixedPoint { r, residual, iterations });
        }
        let (_, s, c, _) = self.map_eval(r, &e, false)?;
        let f: f64 = r * self.beta_tot + e.iter().sum::<f64>();
        let green = 1.0 / (1.0 - f);
        Ok(NumericExcursions { r, e, c, s, green, iterations, residual })
    }

    /// Largest r admitting a finite fixed point, by bracketed bisection to
    /// 1e-12 relative, with boundary-type classification from the approach
    /// of max_p s_p to 1 along a geometric ladder.
    pub fn locate_radius(&self) -> Result<RadiusReport, ExcursionError> {
        let feasible = |r: f64, warm: Option<&[f64]>| -> Option<NumericExcursions> {
            self.solve_numeric(r, warm).ok()
        };
        let mut lo = 1.0;
        let mut lo_sol = match feasible(lo, None) {
            Some(s) => s,
            None => {
                // Extremely lazy walks could in principle fail at 1; fall back.
                lo = 0.5;
                self.solve_numeric(lo, None)?
            }
        };
        let mut hi = lo * 1.05;
        let mut hi_infeasible = false;
        for _ in 0..200 {
            match feasible(hi, Some(&lo_sol.e)) {
                Some(sol) => {
                    lo = hi;
                    lo_sol = sol;
                    hi *= 1.05;
                }
                None => {
                    hi_infeasible = true;
                    break;
                }
            }
        }
        if !hi_infeasible {
            return Err(ExcursionError::NoFixedPoint { r: hi, residual: f64::NAN, iterations: 0 });
        }
        while (hi - lo) / lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            match feasible(mid, Some(&lo_sol.e)) {
                Some(sol) => {
                    lo = mid;
                    lo_sol = sol;
                }
                None => hi = mid,
            }
        }
        let radius = lo;
        let accuracy = (hi - lo) / lo;
        // Boundary type: extrapolate s_p(r) to r = R along a ladder.
        let mut s_extrap = vec![0.0f64; self.p()];
        let mut ladder: Vec<(f64, Vec<f64>)> = Vec::new();
        let mut warm = Some(lo_sol.e.clone());
        for k in 2..=6 {
            let rk = radius * (1.0 - 10f64.powi(-k));
            if let Ok(sol) = self.solve_numeric(rk, warm.as_deref().filter(|_| k == 2)) {
                ladder.push((10f64.powi(-k), sol.s.clone()));
                warm = Some(sol.e);
            }
        }
        for p in 0..self.p() {
            let pts: Vec<(f64, f64)> = ladder.iter().map(|(eps, s)| (*eps, s[p])).collect();
            // s_p(R(1-eps)) ~ s_p(R) - C sqrt(eps) at a branch point, or
            // linear in eps near contact; a sqrt-Richardson on the last two
            // rungs brackets both.
            let n = pts.len();
            s_extrap[p] = if n >= 2 {
                let (e1, s1) = pts[n - 2];
                let (e2, s2) = pts[n - 1];
                let w = (e2 / e1).sqrt();
                (s2 - w * s1) / (1.0 - w)
            } else if n == 1 {
                pts[0].1
            } else {
                0.0
            };
        }
        let contact: Vec<usize> = (0..self.p()).filter(|&p| s_extrap[p] > 1.0 - 1e-4).collect();
        let boundary = if contact.is_empty() {
            BoundaryType::BranchPoint
        } else {
            BoundaryType::DegeneracyContact { factors: contact }
        };
        Ok(RadiusReport { radius, boundary, accuracy })
    }

    /// Series-mode solution: the excursion weights e_p as power series in r
    /// (rescale chosen by the caller, typically the located radius), by
    /// Newton iteration with order doubling over the truncated-series ring.
    pub fn solve_series(&self, n: usize, rescale: f64) -> Result<Vec<Series>, ExcursionError> {
        let np = self.p();
        // Factor Green functions as series in their own variable s (rescale 1).
        let mut g_outer = Vec::with_capacity(np);
        let mut gp_outer = Vec::with_capacity(np);
        for f in &self.factors {
            let coeffs = f.return_series(n)?;
            let g = Series::new(coeffs, 1.0, 0.0);
            gp_outer.push(g.differentiate());
            g_outer.push(g);
        }
        let mut e: Vec<Series> = (0..np).map(|_| Series::zeros(1, rescale)).collect();
        let mut order = 1usize;
        loop {
            // Work at the doubled truncation order; everything below is
            // exact series arithmetic at length order+1.
            let len = order + 1;
            let r_series = Series::identity(order, rescale);
            let beta_term = r_series.scaled(self.beta_tot);
            for ep in e.iter_mut() {
                ep.coeffs.resize(len, 0.0);
            }
            // Residual Phi_p = e_p - (1 - c_p)(1 - 1/G_p(s_p)) and the
            // off-diagonal Jacobian scalar series A_p.
            let mut phi: Vec<Series> = Vec::with_capacity(np);
            let mut a_jac: Vec<Series> = Vec::with_capacity(np);
            for p in 0..np {
                let mut c_p = beta_term.clone();
                for q in 0..np {
                    if q != p {
                        c_p = c_p.add(&e[q])?;
                    }
                }
                let one_minus_c = c_p.scaled(-1.0).add_scalar(1.0);
                let inv_omc = one_minus_c.reciprocal()?;
                let s_p = r_series.scaled(self.a[p]).mul(&inv_omc)?;
                let g_trunc = Series::new(g_outer[p].coeffs[..len.min(g_outer[p].coeffs.len())].to_vec(), 1.0, 0.0);
                let g_at = g_trunc.compose(&s_p)?;
                let ginv = g_at.reciprocal()?;
                let one_minus_ginv = ginv.scaled(-1.0).add_scalar(1.0);
                let map = one_minus_c.mul(&one_minus_ginv)?;
                phi.push(e[p].sub(&map)?);
                let gp_trunc = Series::new(gp_outer[p].coeffs[..len.min(gp_outer[p].coeffs.len())].to_vec(), 1.0, 0.0);
                let gp_at = gp_trunc.compose(&s_p)?;
                // A_p = d map_p / d c_p = s_p G_p'/G_p^2 - (1 - 1/G_p)
                let term = s_p.mul(&gp_at)?.mul(&ginv)?.mul(&ginv)?;
                a_jac.push(term.sub(&one_minus_ginv)?);
            }
            // Solve (I - A) delta = -phi coefficient-recursively; A has
            // positive valuation so coefficient k of delta only needs < k.
            let mut delta: Vec<Vec<f64>> = vec![vec![0.0; len]; np];
            for k in 0..len {
                for p in 0..np {
                    let mut v = -phi[p].coeffs[k];
                    for q in 0..np {
                        if q == p {
                            continue;
                        }
                        // [A_p * delta_q]_k using delta_q coefficients < k.
                        for m in 1..=k {
                            v += a_jac[p].coeffs[m] * delta[q][k - m];
                        }
                    }
                    delta[p][k] = v;
                }
            }
            for p in 0..np {
                let d = Series::new(delta[p].clone(), rescale, 0.0);
                e[p] = e[p].add(&d)?;
            }
            if order >= n {
                break;
            }
            order = (order * 2).min(n);
        }
        for ep in e.iter_mut() {
            ep.coeffs.resize(n + 1, 0.0);
        }
        Ok(e)
    }

    /// Return-probability generating series: coefficients p^(n)(e,e).
    pub fn green_series(&self, n: usize, rescale: f64) -> Result<Series, ExcursionError> {
        let e = self.solve_series(n, rescale)?;
        let mut f = Series::identity(n, rescale).scaled(self.beta_tot);
        for ep in &e {
            f = f.add(ep)?;
        }
        let g = f.scaled(-1.0).add_scalar(1.0).reciprocal()?;
        Ok(g)
    }

    /// Ambient Green derivatives G^(j)(e,e|r), j = 0..=max_deriv (<= 3),
    /// by implicit differentiation of the fixed-point system.
    pub fn green_derivatives(
        &self,
        r: f64,
        max_deriv: usize,
    ) -> Result<Vec<(f64, f64)>, ExcursionError> {
        assert!(max_deriv <= 3);
        let sol = self.solve_numeric(r, None)?;
        self.green_derivatives_with(r, &sol, max_deriv)
    }

    /// Same, reusing an already-computed fixed point (ladder warm starts).
    pub fn green_derivatives_with(
        &self,
        r: f64,
        sol: &NumericExcursions,
        max_deriv: usize,
    ) -> Result<Vec<(f64, f64)>, ExcursionError> {
        let jets = self.excursion_jets(r, sol)?;
        // F = r beta_tot + sum e_p; G = 1/(1-F).
        let mut f_jet = Jet3::variable(r).scale(self.beta_tot);
        for j in &jets {
            f_jet = f_jet.add(*j);
        }
        let g_jet = Jet3::constant(1.0).add(f_jet.scale(-1.0)).recip();
        let mut out = Vec::with_capacity(max_deriv + 1);
        let rel = 1e-12 + sol.residual * 10.0;
        for k in 0..=max_deriv {
            let v = g_jet.deriv(k);
            out.push((v, v.abs() * rel * (1.0 + k as f64 * 10.0)));
        }
        Ok(out)
    }

    /// Taylor jets of every e_p as functions of r, solved order by order:
    /// each order k satisfies (I - A) e^(k) = b_k with A the numeric
    /// Jacobian scalar and b_k from jet evaluation with e^(k) zeroed.
    pub fn excursion_jets(
        &self,
        r: f64,
        sol: &NumericExcursions,
    ) -> Result<Vec<Jet3>, ExcursionError> {
        let np = self.p();
        let mut e_jets: Vec<Jet3> = sol.e.iter().map(|&v| Jet3::constant(v)).collect();
        // Numeric Jacobian scalars at the fixed point.
        let (_, _, _, a_scalar) = self.map_eval(r, &sol.e, true)?;
        let mut j = DMatrix::identity(np, np);
        for p in 0..np {
            for q in 0..np {
                if q != p {
                    j[(p, q)] = -a_scalar[p];
                }
            }
        }
        let lu = j.lu();
        for k in 1..=3usize {
            // Evaluate Phi = phi_map(e_jets, r) with the k-th jet entries of
            // e zeroed (they are zero right now), read coefficient k.
            let phi = self.phi_jets(r, &e_jets)?;
            let rhs = DVector::from_iterator(np, (0..np).map(|p| phi[p].0[k]));
            let coef = lu.solve(&rhs).expect("jet solve failed");
            for p in 0..np {
                e_jets[p].0[k] = coef[p];
            }
        }
        Ok(e_jets)
    }

    /// Jet evaluation of the fixed-point map at e given as jets in r.
    fn phi_jets(&self, r: f64, e: &[Jet3]) -> Result<Vec<Jet3>, ExcursionError> {
        let np = self.p();
        let r_jet = Jet3::variable(r);
        let mut out = Vec::with_capacity(np);
        for p in 0..np {
            let mut c = r_jet.scale(self.beta_tot);
            for q in 0..np {
                if q != p {
                    c = c.add(e[q]);
                }
            }
            let omc = Jet3::constant(1.0).add(c.scale(-1.0));
            let s = r_jet.scale(self.a[p]).mul(omc.recip());
            let s0 = s.0[0].min(1.0);
            let g = self.factors[p].green_diag(s0, 3)?;
            let mut gd = [0.0f64; 4];
            const FACT: [f64; 4] = [1.0, 1.0, 2.0, 6.0];
            for (i, gv) in g.iter().enumerate() {
                gd[i] = match gv {
                    GreenValue::Finite { value, .. } => value / FACT[i],
                    GreenValue::Divergent { .. } => return Err(ExcursionError::ModelRequired),
                };
            }
            let g_jet = s.compose(gd);
            let one_minus_ginv = Jet3::constant(1.0).add(g_jet.recip().scale(-1.0));
            out.push(omc.mul(one_minus_ginv));
        }
        Ok(out)
    }

    /// Diagonal weight and in-factor step part of the first-return kernel
    /// to factor p at r, with its defining substochasticity data.
    pub fn first_return_kernel(
        &self,
        p: usize,
        r: f64,
    ) -> Result<FirstReturnKernel, ExcursionError> {
        let sol = self.solve_numeric(r, None)?;
        let step: Vec<(FactorElem, f64)> = self
            .walk
            .normalized_factor_step(p)
            .into_iter()
            .map(|(x, w)| (x, r * self.a[p] * w))
            .collect();
        Ok(FirstReturnKernel {
            factor: p,
            r,
            diagonal: sol.c[p],
            step,
            validated: false,
        })
    }

    /// Green function of the first-return kernel to factor p in the lazy
    /// variable t, with derivatives up to order 3 at the given t <= 1:
    /// G_{p,r}(e,e|t) = (1 - t c_p)^{-1} G_p(t r a_p / (1 - t c_p)).
    pub fn factor_green_t(
        &self,
        p: usize,
        r: f64,
        t: f64,
        max_deriv: usize,
        sol: &NumericExcursions,
    ) -> Result<Vec<GreenValue>, ExcursionError> {
        assert!(max_deriv <= 3);
        let cp = sol.c[p];
        let t_jet = Jet3::variable(t);
        let denom = Jet3::constant(1.0).add(t_jet.scale(-cp));
        let pref = denom.recip();
        let inner = t_jet.scale(r * self.a[p]).mul(pref);
        let s0 = inner.0[0];
        if s0 > 1.0 + FEAS_TOL {
            return Err(ExcursionError::BoundaryContact { r, factors: vec![p] });
        }
        let g = self.factors[p].green_diag(s0.min(1.0), max_deriv)?;
        let mut gd = [0.0f64; 4];
        const FACT: [f64; 4] = [1.0, 1.0, 2.0, 6.0];
        let mut divergent_from = usize::MAX;
        for (i, gv) in g.iter().enumerate() {
            match gv {
                GreenValue::Finite { value, .. } => gd[i] = value / FACT[i],
                GreenValue::Divergent { .. } => {
                    divergent_from = divergent_from.min(i);
                }
            }
        }
        if divergent_from == 0 {
            return Ok(g);
        }
        let g_jet = inner.compose(gd).mul(pref);
        let mut out = Vec::with_capacity(max_deriv + 1);
        for (k, item) in g.iter().enumerate().take(max_deriv + 1) {
            if k >= divergent_from {
                out.push(item.clone());
            } else {
                let v = g_jet.deriv(k);
                out.push(GreenValue::Finite { value: v, err: v.abs() * 1e-11 });
            }
        }
        Ok(out)
    }

    /// Green value of the first-return kernel at t = 1 between factor
    /// elements x and 0 (the closed lazification route of the consistency
    /// identity): (1 - c_p)^{-1} G_p(x, 0 | s_p).
    pub fn factor_green_offdiag(
        &mut self,
        p: usize,
        x: &FactorElem,
        sol: &NumericExcursions,
    ) -> Result<f64, ExcursionError> {
        let sp = sol.s[p].min(1.0);
        let v = match (&mut self.factors[p], x) {
            (FactorGreen::Lattice(cache), FactorElem::Lattice(pt)) => {
                cache.ensure_point(pt)?;
                cache.green_eval(sp, pt, 0)?[0].unwrap_finite()
            }
            (FactorGreen::Finite(cache), FactorElem::Finite(i)) => {
                cache.green_point(sp, *i, 0)[0].unwrap_finite()
            }
            _ => panic!("element kind does not match factor"),
        };
        Ok(v / (1.0 - sol.c[p]))
    }

    /// Cross-checks the equation-based radius against the coefficient-based
    /// radius estimate of the return series.
    pub fn radius_cross_check(&self, report: &RadiusReport, n: usize) -> Result<f64, ExcursionError> {
        let series = self.green_series(n, report.radius)?;
        let (r_coeff, _unc) = radius_estimate(&series)?;
        let rel = (r_coeff - report.radius).abs() / report.radius;
        if rel > 1e-6 {
            return Err(ExcursionError::CrossCheckFailed {
                equation: report.radius,
                coefficients: r_coeff,
            });
        }
        Ok(rel)
    }
}

/// First-return kernel to one factor at a fixed r: diagonal weight plus
/// the in-factor one-step part.
#[derive(Debug, Clone)]
pub struct FirstReturnKernel {
    pub factor: usize,
    pub r: f64,
    pub diagonal: f64,
    pub step: Vec<(FactorElem, f64)>,
    pub validated: bool,
}

impl FirstReturnKernel {
    pub fn total_mass(&self) -> f64 {
        self.diagonal + self.step.iter().map(|(_, w)| w).sum::<f64>()
    }

    /// Validates the analytic kernel against the brute-force oracle within
    /// its tail bound; a mismatch is fatal (the branch-return structural
    /// assumption would be broken).
    pub fn validate(
        &mut self,
        walk: &WalkSpec,
        max_len: usize,
        radius_hint: f64,
    ) -> Result<f64, ExcursionError> {
        let brute = crate::group::brute_force_first_return(
            walk,
            self.factor,
            self.r,
            max_len,
            Some(radius_hint),
            crate::group::DEFAULT_ELEMENT_BUDGET,
        )?;
        let tol = brute.tail_bound + 1e-12;
        let f = &walk.factors[self.factor];
        let mut max_dev = 0.0f64;
        // Diagonal entry.
        let id = f.identity();
        let brute_diag = brute.kernel.get(&id).copied().unwrap_or(0.0);
        let dev = (brute_diag - self.diagonal).abs();
        if dev > tol {
            return Err(ExcursionError::ValidationFailed {
                element: id,
                analytic: self.diagonal,
                brute: brute_diag,
                tail: brute.tail_bound,
            });
        }
        max_dev = max_dev.max(dev);
        // Step entries: brute value at x is the one-step part exactly
        // (first-return paths cannot end elsewhere in the factor).
        for (x, w) in &self.step {
            let b = brute.kernel.get(x).copied().unwrap_or(0.0);
            let dev = (b - w).abs();
            if dev > tol {
                return Err(ExcursionError::ValidationFailed {
                    element: x.clone(),
                    analytic: *w,
                    brute: b,
                    tail: brute.tail_bound,
                });
            }
            max_dev = max_dev.max(dev);
        }
        self.validated = true;
        Ok(max_dev)
    }
}

/// Min/max statistics of the multiplicativity ratio
/// A = G(e, xy | r) / (G(e, x | r) G(e, y | r)) over sampled splittings.
#[derive(Debug, Clone)]
pub struct AnconaStats {
    pub min: f64,
    pub max: f64,
    pub samples: usize,
}

/// Empirical multiplicativity probe along syllable-boundary splittings,
/// using the brute-force off-diagonal Green oracle with tail bounds.
pub fn ancona_probe(
    walk: &WalkSpec,
    r: f64,
    radius_hint: f64,
    splittings: &[(crate::group::Word, crate::group::Word)],
    n_max: usize,
) -> Result<AnconaStats, ExcursionError> {
    let mut min = f64::INFINITY;
    let mut max = 0.0f64;
    for (x, y) in splittings {
        let mut concat = x.syllables.clone();
        concat.extend(y.syllables.iter().cloned());
        let xy = crate::group::normalize_word(walk, &concat)?;
        let (gxy, txy) =
            crate::group::brute_force_green_offdiag(walk, &xy, r, n_max, radius_hint, 20_000_000)?;
        let (gx, tx) =
            crate::group::brute_force_green_offdiag(walk, x, r, n_max, radius_hint, 20_000_000)?;
        let (gy, ty) =
            crate::group::brute_force_green_offdiag(walk, y, r, n_max, radius_hint, 20_000_000)?;
        for (g, t) in [(gxy, txy), (gx, tx), (gy, ty)] {
            if t > 0.1 * g {
                return Err(ExcursionError::NoFixedPoint { r, residual: t / g, iterations: 0 });
            }
        }
        let a = gxy / (gx * gy);
        min = min.min(a);
        max = max.max(a);
    }
    Ok(AnconaStats { min, max, samples: splittings.len() })
}
