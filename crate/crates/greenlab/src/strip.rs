//! Z^d x {1..N}-invariant kernels: exponential tilting, dominant
//! eigen-triples, the convex minimization rho = min_u lambda(u), derivative
//! formulas along r-families, degeneracy ladders, and local-limit checks.

use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StripError {
    #[error("kernel is reducible: strip indices do not communicate")]
    Reducible,
    #[error("power iteration failed to converge (subdominant gap too small)")]
    SlowConvergence,
    #[error("two derivative routes disagree: eigen {eigen} vs finite-difference {fd}")]
    RouteMismatch { eigen: f64, fd: f64 },
    #[error("convolution budget exceeded at step {0}")]
    BudgetExceeded(usize),
    #[error("descent direction appears unbounded below (internal error)")]
    UnboundedBelowDirection,
    #[error("margin {margin:.3e} within 3x of its uncertainty {uncertainty:.3e}")]
    InconclusiveMargin { margin: f64, uncertainty: f64 },
}

/// A finitely supported kernel on Z^d x {1..N}, invariant under Z^d
/// translations: entries[(j, j')] maps the horizontal displacement x to a
/// nonnegative weight.
#[derive(Debug, Clone)]
pub struct StripKernel {
    pub d: usize,
    pub n: usize,
    pub entries: HashMap<(usize, usize), Vec<(Vec<i64>, f64)>>,
}

impl StripKernel {
    pub fn scalar(d: usize, support: Vec<(Vec<i64>, f64)>) -> Self {
        let mut entries = HashMap::new();
        entries.insert((0, 0), support);
        StripKernel { d, n: 1, entries }
    }

    /// Strong connectivity of the strip-index graph.
    pub fn check_irreducible(&self) -> Result<(), StripError> {
        let n = self.n;
        let mut adj = vec![vec![false; n]; n];
        for ((j, j2), sup) in &self.entries {
            if sup.iter().any(|(_, w)| *w > 0.0) {
                adj[*j][*j2] = true;
            }
        }
        let reach_all = |start: usize, forward: bool| -> bool {
            let mut seen = vec![false; n];
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(a) = stack.pop() {
                for b in 0..n {
                    let edge = if forward { adj[a][b] } else { adj[b][a] };
                    if edge && !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
            seen.iter().all(|&s| s)
        };
        if reach_all(0, true) && reach_all(0, false) {
            Ok(())
        } else {
            Err(StripError::Reducible)
        }
    }

    /// Entry-wise scaling (e.g. normalizing the dominant eigenvalue to 1).
    pub fn scaled(&self, k: f64) -> StripKernel {
        let entries = self
            .entries
            .iter()
            .map(|(key, sup)| (*key, sup.iter().map(|(x, w)| (x.clone(), w * k)).collect()))
            .collect();
        StripKernel { d: self.d, n: self.n, entries }
    }

    /// Symmetry check: K(j,j')(x) = K(j',j)(-x).
    pub fn is_symmetric(&self) -> bool {
        for ((j, j2), sup) in &self.entries {
            for (x, w) in sup {
                let neg: Vec<i64> = x.iter().map(|&c| -c).collect();
                let back: f64 = self
                    .entries
                    .get(&(*j2, *j))
                    .map(|s| s.iter().filter(|(y, _)| *y == neg).map(|(_, v)| v).sum())
                    .unwrap_or(0.0);
                if (back - w).abs() > 1e-12 * w.abs().max(back.abs()) {
                    return false;
                }
            }
        }
        true
    }
}

/// Tilted vertical-displacement matrix: entry (j, j') =
/// sum_x K(j,j')(x) exp(u . x).
pub fn tilted_matrix(k: &StripKernel, u: &[f64]) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(k.n, k.n);
    for ((j, j2), sup) in &k.entries {
        let mut acc = 0.0;
        for (x, w) in sup {
            let dot: f64 = x.iter().zip(u).map(|(&c, &v)| c as f64 * v).sum();
            acc += w * dot.exp();
        }
        f[(*j, *j2)] = acc;
    }
    f
}

/// Entry-wise x-weighted tilted matrix: d/du_i of tilted_matrix.
pub fn tilted_matrix_grad(k: &StripKernel, u: &[f64], i: usize) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(k.n, k.n);
    for ((j, j2), sup) in &k.entries {
        let mut acc = 0.0;
        for (x, w) in sup {
            let dot: f64 = x.iter().zip(u).map(|(&c, &v)| c as f64 * v).sum();
            acc += w * x[i] as f64 * dot.exp();
        }
        f[(*j, *j2)] = acc;
    }
    f
}

/// Dominant eigenvalue with positive left/right eigenvectors normalized to
/// nu . c = 1.
#[derive(Debug, Clone)]
pub struct EigenTriple {
    pub lambda: f64,
    pub c: DVector<f64>,
    pub nu: DVector<f64>,
}

/// Perron-Frobenius data of a nonnegative irreducible matrix by shifted
/// power iteration, with a dense Schur fallback when the spectral gap is
/// too small.
pub fn dominant_eigen(f: &DMatrix<f64>) -> Result<EigenTriple, StripError> {
    let n = f.nrows();
    if n == 1 {
        let lambda = f[(0, 0)];
        return Ok(EigenTriple {
            lambda,
            c: DVector::from_element(1, 1.0),
            nu: DVector::from_element(1, 1.0),
        });
    }
    // Shift by the max row sum to make the iteration matrix primitive.
    let shift: f64 = (0..n)
        .map(|i| (0..n).map(|j| f[(i, j)]).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    let a = f + DMatrix::identity(n, n) * shift;
    let power = |m: &DMatrix<f64>| -> Option<(f64, DVector<f64>)> {
        let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut lam = 0.0;
        for _ in 0..100_000 {
            let w = m * &v;
            let nl = w.norm();
            if nl == 0.0 {
                return None;
            }
            let w = w / nl;
            let delta = (&w - &v).norm().min((&w + &v).norm());
            v = w;
            lam = nl;
            if delta < 1e-16 {
                return Some((lam, v));
            }
        }
        Some((lam, v))
    };
    let right = power(&a);
    let left = power(&a.transpose());
    let (lam_r, c, nu) = match (right, left) {
        (Some((lr, c)), Some((_, nu))) => (lr - shift, c, nu),
        _ => return Err(StripError::SlowConvergence),
    };
    let mut c = c.abs();
    let mut nu = nu.abs();
    // Residual check against the unshifted matrix; fall back to a dense
    // eigensolve when the gap defeated the power iteration.
    let res_r = (f * &c - &c * lam_r).norm() / lam_r.max(1e-300);
    let res_l = (f.transpose() * &nu - &nu * lam_r).norm() / lam_r.max(1e-300);
    let mut lambda = lam_r;
    if res_r > 1e-12 || res_l > 1e-12 {
        // Dense fallback: the dominant eigenvalue of a nonnegative matrix is
        // real, so take the largest real part of the full spectrum.
        lambda = f
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        // Inverse iteration for the eigenvectors.
        let shift_m = f - DMatrix::identity(n, n) * (lambda * (1.0 + 1e-10) + 1e-14);
        let lu = shift_m.clone().lu();
        let lut = shift_m.transpose().lu();
        let mut vc = DVector::from_element(n, 1.0);
        let mut vn = DVector::from_element(n, 1.0);
        for _ in 0..50 {
            if let Some(s) = lu.solve(&vc) {
                vc = &s / s.norm();
            }
            if let Some(s) = lut.solve(&vn) {
                vn = &s / s.norm();
            }
        }
        c = vc.abs();
        nu = vn.abs();
        let rr = (f * &c - &c * lambda).norm() / lambda.max(1e-300);
        if rr > 1e-10 {
            return Err(StripError::SlowConvergence);
        }
    }
    // Normalize nu . c = 1 with c scaled to unit max entry.
    let cmax = c.max();
    c /= cmax;
    let dot = nu.dot(&c);
    nu /= dot;
    if c.iter().any(|&v| v <= 0.0) || nu.iter().any(|&v| v <= 0.0) {
        return Err(StripError::Reducible);
    }
    Ok(EigenTriple { lambda, c, nu })
}

fn lambda_of(k: &StripKernel, u: &[f64]) -> Result<EigenTriple, StripError> {
    dominant_eigen(&tilted_matrix(k, u))
}

/// Minimizes u -> lambda(F(u)) by damped Newton with the eigen-gradient
/// grad lambda = nu . (dF/du) . c and a finite-difference Hessian.
pub fn minimize_lambda(k: &StripKernel) -> Result<(Vec<f64>, f64), StripError> {
    k.check_irreducible()?;
    let d = k.d;
    let mut u = vec![0.0; d];
    let mut trip = lambda_of(k, &u)?;
    let grad = |u: &[f64], t: &EigenTriple| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let g = tilted_matrix_grad(k, u, i);
                t.nu.dot(&(&g * &t.c))
            })
            .collect()
    };
    for _ in 0..200 {
        let g = grad(&u, &trip);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm <= 1e-11 * trip.lambda.max(1.0) {
            break;
        }
        // Finite-difference Hessian of lambda.
        let h = 1e-5;
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..d {
            let mut up = u.clone();
            up[i] += h;
            let tp = lambda_of(k, &up)?;
            let gp = grad(&up, &tp);
            let mut um = u.clone();
            um[i] -= h;
            let tm = lambda_of(k, &um)?;
            let gm = grad(&um, &tm);
            for j in 0..d {
                hess[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
            }
        }
        // Symmetrize; regularize toward gradient descent if needed.
        hess = (&hess + hess.transpose()) * 0.5;
        let gvec = DVector::from_column_slice(&g);
        let step = match hess.clone().lu().solve(&gvec) {
            Some(s) if s.dot(&gvec) > 0.0 => -s,
            _ => -&gvec / (hess.norm().max(1e-12)),
        };
        // Armijo backtracking on lambda.
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..d).map(|i| u[i] + t * step[i]).collect();
            let tt = lambda_of(k, &trial)?;
            if tt.lambda < trip.lambda - 1e-4 * t * gnorm * step.norm()
                || tt.lambda < trip.lambda * (1.0 - 1e-15)
            {
                u = trial;
                trip = tt;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // Near the minimum the lambda decrease underflows before the
            // gradient tolerance is met; a full Newton step still squares
            // the gradient norm, so accept it on that criterion instead.
            if step.norm() < 1e-6 {
                let trial: Vec<f64> = (0..d).map(|i| u[i] + step[i]).collect();
                if let Ok(tt) = lambda_of(k, &trial) {
                    let gt = grad(&trial, &tt);
                    let gtn = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gtn < gnorm {
                        u = trial;
                        trip = tt;
                    }
                }
            }
            break;
        }
        if !trip.lambda.is_finite() {
            return Err(StripError::UnboundedBelowDirection);
        }
    }
    // Final gradient tolerance check.
    let g = grad(&u, &trip);
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gnorm > 1e-10 * trip.lambda.max(1.0) {
        return Err(StripError::SlowConvergence);
    }
    Ok((u, trip.lambda))
}

/// One row of a rho-curve evaluation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RhoPoint {
    pub r: f64,
    pub rho: f64,
    pub u: Vec<f64>,
    pub rho_prime_eigen: f64,
    pub rho_prime_fd: f64,
}

/// Evaluates rho(r) = min_u lambda_r(u) over a grid, with the derivative
/// computed both by the eigen-formula nu . F' . c at u_r and by centered
/// finite differences of rho; the two routes must agree to 1e-6 relative.
pub fn rho_curve(
    family: &dyn Fn(f64) -> StripKernel,
    family_deriv: Option<&dyn Fn(f64) -> StripKernel>,
    grid: &[f64],
) -> Result<Vec<RhoPoint>, StripError> {
    let mut out = Vec::with_capacity(grid.len());
    for &r in grid {
        let k = family(r);
        let (u, rho) = minimize_lambda(&k)?;
        let trip = lambda_of(&k, &u)?;
        // Eigen route: nu . (dF/dr at u) . c.
        let fprime = match family_deriv {
            Some(fd) => tilted_matrix(&fd(r), &u),
            None => {
                let h = 1e-6 * r.abs().max(1.0);
                let fp = tilted_matrix(&family(r + h), &u);
                let fm = tilted_matrix(&family(r - h), &u);
                (fp - fm) / (2.0 * h)
            }
        };
        let rho_prime_eigen = trip.nu.dot(&(&fprime * &trip.c));
        // Finite-difference route on rho itself, with re-minimization.
        let h = 1e-5 * r.abs().max(1.0);
        let (_, rp) = minimize_lambda(&family(r + h))?;
        let (_, rm) = minimize_lambda(&family(r - h))?;
        let rho_prime_fd = (rp - rm) / (2.0 * h);
        let denom = rho_prime_eigen.abs().max(rho_prime_fd.abs()).max(1e-300);
        if (rho_prime_eigen - rho_prime_fd).abs() / denom > 1e-5 {
            return Err(StripError::RouteMismatch { eigen: rho_prime_eigen, fd: rho_prime_fd });
        }
        out.push(RhoPoint { r, rho, u, rho_prime_eigen, rho_prime_fd });
    }
    Ok(out)
}

pub fn rho_curve_csv(points: &[RhoPoint]) -> String {
    let mut s = String::from("r,rho,rho_prime_eigen,rho_prime_fd,u\n");
    for p in points {
        let u = p
            .u
            .iter()
            .map(|v| format!("{v:.17e}"))
            .collect::<Vec<_>>()
            .join(";");
        s.push_str(&format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            p.r, p.rho, p.rho_prime_eigen, p.rho_prime_fd, u
        ));
    }
    s
}

/// Outcome of the spectral-degeneracy ladder test for one factor.
#[derive(Debug, Clone)]
pub struct DegeneracyVerdict {
    pub degenerate: bool,
    pub near_critical: bool,
    pub margin: f64,
    pub uncertainty: f64,
}

/// Boundary-ladder degeneracy test: extrapolates the first-return-kernel
/// spectral radius rho_p(r) = c_p(r) + r a_p to r = R along the geometric
/// ladder r_k = R(1 - 10^{-k}), k = 2..6.
///
/// Symmetric factor kernels are minimized at u = 0, so rho_p is the total
/// kernel mass; no strip minimization is needed for the free-product case.
pub fn degeneracy_ladder(
    solver: &crate::excursion::Solver,
    p: usize,
    radius: f64,
) -> Result<DegeneracyVerdict, StripError> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    for k in 2..=6 {
        let eps = 10f64.powi(-k);
        let r = radius * (1.0 - eps);
        match solver.solve_numeric(r, warm.as_deref()) {
            Ok(sol) => {
                let rho = sol.c[p] + r * solver.a[p];
                warm = Some(sol.e);
                pts.push((eps, rho));
            }
            Err(_) => break,
        }
    }
    if pts.len() < 3 {
        return Err(StripError::SlowConvergence);
    }
    // rho(R(1-eps)) = rho(R) - C sqrt(eps) + ... at a square-root branch
    // point, or rho(R) - C' eps when smooth; the sqrt-extrapolation on
    // consecutive rungs covers both (it over-corrects the smooth case but
    // the over-correction vanishes with eps).
    let extrap = |a: (f64, f64), b: (f64, f64)| -> f64 {
        let w = (b.0 / a.0).sqrt();
        (b.1 - w * a.1) / (1.0 - w)
    };
    let n = pts.len();
    let e1 = extrap(pts[n - 3], pts[n - 2]);
    let e2 = extrap(pts[n - 2], pts[n - 1]);
    let rho_at_radius = e2;
    let uncertainty = (e2 - e1).abs().max(1e-12);
    let margin = 1.0 - rho_at_radius;
    let degenerate = margin <= uncertainty;
    let near_critical = !degenerate && margin <= 3.0 * uncertainty;
    Ok(DegeneracyVerdict { degenerate, near_critical, margin, uncertainty })
}

/// Tilt-dependent local-limit parameters: drift, covariance of log lambda,
/// and the amplitude entries.
#[derive(Debug, Clone)]
pub struct StripAsymptotics {
    pub beta: Vec<f64>,
    pub q: DMatrix<f64>,
    pub triple: EigenTriple,
    pub multiplicity: u64,
    pub period: usize,
}

/// Computes beta_v = grad log lambda and Q = Hessian of log lambda at v by
/// central differences, plus the eigen-triple at v.
pub fn strip_asymptotics(k: &StripKernel, v: &[f64]) -> Result<StripAsymptotics, StripError> {
    let d = k.d;
    let h = 1e-4;
    let lam = |u: &[f64]| -> Result<f64, StripError> { Ok(lambda_of(k, u)?.lambda) };
    let l0 = lam(v)?.ln();
    let mut beta = vec![0.0; d];
    let mut q = DMatrix::zeros(d, d);
    for i in 0..d {
        let mut up = v.to_vec();
        up[i] += h;
        let mut um = v.to_vec();
        um[i] -= h;
        let lp = lam(&up)?.ln();
        let lm = lam(&um)?.ln();
        beta[i] = (lp - lm) / (2.0 * h);
        q[(i, i)] = (lp - 2.0 * l0 + lm) / (h * h);
        for j in (i + 1)..d {
            let mut upp = v.to_vec();
            upp[i] += h;
            upp[j] += h;
            let mut upm = v.to_vec();
            upm[i] += h;
            upm[j] -= h;
            let mut ump = v.to_vec();
            ump[i] -= h;
            ump[j] += h;
            let mut umm = v.to_vec();
            umm[i] -= h;
            umm[j] -= h;
            let mixed =
                (lam(&upp)?.ln() - lam(&upm)?.ln() - lam(&ump)?.ln() + lam(&umm)?.ln())
                    / (4.0 * h * h);
            q[(i, j)] = mixed;
            q[(j, i)] = mixed;
        }
    }
    let triple = lambda_of(k, v)?;
    // Periodicity and lattice multiplicity. For scalar kernels, reuse the
    // difference-lattice index; for genuine strips require an aperiodic
    // kernel with full lattice support (checked empirically below).
    let (multiplicity, period) = if k.n == 1 {
        let sup = &k.entries[&(0, 0)];
        let base = &sup[0].0;
        let mut diffs: Vec<Vec<i64>> = sup[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(base).map(|(a, b)| a - b).collect())
            .collect();
        diffs.push(base.iter().map(|&c| 2 * c).collect());
        let m = crate::group::lattice_index(&diffs, d).ok_or(StripError::Reducible)?;
        let parity_odd = sup.iter().all(|(x, _)| (x.iter().sum::<i64>()) % 2 != 0);
        (m, if parity_odd { 2 } else { 1 })
    } else {
        (1, 1)
    };
    Ok(StripAsymptotics { beta, q, triple, multiplicity, period })
}

/// Sup-norm deviation sequence of the strip local limit: for a kernel
/// normalized so lambda(v) = 1, compares (2 pi n)^{d/2} p_n(x,j) e^{v.x}
/// against the Gaussian profile over the support, at the requested steps.
///
/// Returns (n, sup_x |a_n(x)|) pairs.
pub fn strip_local_limit_check(
    k: &StripKernel,
    v: &[f64],
    j0: usize,
    steps: &[usize],
    budget: usize,
) -> Result<Vec<(usize, f64)>, StripError> {
    k.check_irreducible()?;
    let asym = strip_asymptotics(k, v)?;
    let lam = asym.triple.lambda;
    if (lam - 1.0).abs() > 1e-9 {
        // Caller must rescale; tolerate tiny drift by renormalizing here.
        return strip_local_limit_check(&k.scaled(1.0 / lam), v, j0, steps, budget);
    }
    let d = k.d;
    let n_max = *steps.iter().max().unwrap_or(&0);
    // Exact convolution over (x, j).
    let mut dist: HashMap<(Vec<i64>, usize), f64> = HashMap::new();
    dist.insert((vec![0; d], j0), 1.0);
    let det_q = asym.q.clone().determinant();
    let q_inv = asym.q.clone().try_inverse().ok_or(StripError::Reducible)?;
    let mut out = Vec::new();
    let alpha_base = asym.multiplicity as f64 / det_q.sqrt();
    for n in 1..=n_max {
        let mut next: HashMap<(Vec<i64>, usize), f64> = HashMap::with_capacity(dist.len() * 2);
        for ((x, j), mass) in &dist {
            for ((ja, jb), sup) in &k.entries {
                if ja != j {
                    continue;
                }
                for (step, w) in sup {
                    let nx: Vec<i64> = x.iter().zip(step).map(|(a, b)| a + b).collect();
                    *next.entry((nx, *jb)).or_insert(0.0) += mass * w;
                }
            }
        }
        if next.len() > budget {
            return Err(StripError::BudgetExceeded(n));
        }
        dist = next;
        if steps.contains(&n) {
            let nf = n as f64;
            let mut sup_dev = 0.0f64;
            for ((x, j), p) in &dist {
                if *p <= 0.0 {
                    continue;
                }
                let ex: f64 = x.iter().zip(v).map(|(&c, &vv)| c as f64 * vv).sum();
                let a_n = (2.0 * std::f64::consts::PI * nf).powf(d as f64 / 2.0) * p * ex.exp();
                // Gaussian profile with drift beta and covariance n Q.
                let dx =
                    DVector::from_iterator(d, x.iter().zip(&asym.beta).map(|(&c, b)| c as f64 - nf * b));
                let quad = (&q_inv * &dx).dot(&dx) / (2.0 * nf);
                let target =
                    alpha_base * asym.triple.c[j0] * asym.triple.nu[*j] * (-quad).exp();
                let dev = (a_n - target).abs();
                sup_dev = sup_dev.max(dev);
            }
            out.push((n, sup_dev));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn srw_scalar(scale: f64) -> StripKernel {
        StripKernel::scalar(1, vec![(vec![1], 0.5 * scale), (vec![-1], 0.5 * scale)])
    }

    #[test]
    fn tilted_matrix_values() {
        let k = srw_scalar(0.7);
        let f0 = tilted_matrix(&k, &[0.0]);
        assert!((f0[(0, 0)] - 0.7).abs() < 1e-15);
        let f1 = tilted_matrix(&k, &[1.0]);
        assert!((f1[(0, 0)] - 0.7 * 1f64.cosh()).abs() < 1e-14);
    }

    #[test]
    fn dominant_eigen_one_by_one() {
        let f = DMatrix::from_element(1, 1, 0.42);
        let t = dominant_eigen(&f).unwrap();
        assert_eq!(t.lambda, 0.42);
        assert_eq!(t.c[0], 1.0);
        assert_eq!(t.nu[0], 1.0);
    }

    #[test]
    fn dominant_eigen_swap_matrix() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let t = dominant_eigen(&f).unwrap();
        assert!((t.lambda - 1.0).abs() < 1e-12);
        assert!((t.c[0] - t.c[1]).abs() < 1e-10);
        assert!((t.nu.dot(&t.c) - 1.0).abs() < 1e-14);
        // With c normalized to max 1: c = (1,1), nu = (1/2,1/2).
        assert!((t.nu[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn dominant_eigen_homogeneity() {
        let f = DMatrix::from_row_slice(2, 2, &[0.3, 0.5, 0.2, 0.4]);
        let t1 = dominant_eigen(&f).unwrap();
        let t2 = dominant_eigen(&(&f * 3.0)).unwrap();
        assert!((t2.lambda - 3.0 * t1.lambda).abs() < 1e-10);
        for i in 0..2 {
            assert!((t1.c[i] - t2.c[i]).abs() < 1e-8);
            assert!((t1.nu[i] - t2.nu[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn eigen_residuals() {
        let f = DMatrix::from_row_slice(3, 3, &[0.1, 0.4, 0.0, 0.3, 0.0, 0.2, 0.0, 0.5, 0.1]);
        let t = dominant_eigen(&f).unwrap();
        let res = (&f * &t.c - &t.c * t.lambda).norm();
        assert!(res < 1e-12 * t.lambda, "res={res}");
        let resl = (f.transpose() * &t.nu - &t.nu * t.lambda).norm();
        assert!(resl < 1e-12 * t.lambda);
        assert!((t.nu.dot(&t.c) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn minimize_symmetric_is_zero() {
        let mut k = srw_scalar(0.8);
        k.entries.get_mut(&(0, 0)).unwrap().push((vec![0], 0.1));
        let (u, rho) = minimize_lambda(&k).unwrap();
        assert!(u[0].abs() < 1e-9, "u={}", u[0]);
        assert!((rho - 0.9).abs() < 1e-10);
    }

    #[test]
    fn minimize_asymmetric_closed_form() {
        // Weights a at +1, b at -1: min over u of a e^u + b e^-u = 2 sqrt(ab)
        // at u = ln(b/a)/2.
        let k = StripKernel::scalar(1, vec![(vec![1], 0.4), (vec![-1], 0.1)]);
        let (u, rho) = minimize_lambda(&k).unwrap();
        assert!((rho - 0.4).abs() < 1e-10, "rho={rho}");
        assert!((u[0] - 0.5 * (0.1f64 / 0.4).ln()).abs() < 1e-6, "u={}", u[0]);
    }

    #[test]
    fn minimize_never_exceeds_untilted() {
        let k = StripKernel::scalar(
            2,
            vec![
                (vec![1, 0], 0.3),
                (vec![-1, 0], 0.1),
                (vec![0, 1], 0.25),
                (vec![0, -1], 0.25),
                (vec![0, 0], 0.1),
            ],
        );
        let (_, rho) = minimize_lambda(&k).unwrap();
        let l0 = dominant_eigen(&tilted_matrix(&k, &[0.0, 0.0])).unwrap().lambda;
        assert!(rho <= l0 + 1e-12);
    }

    #[test]
    fn reducible_detected() {
        let mut entries = HashMap::new();
        entries.insert((0, 0), vec![(vec![1], 0.5), (vec![-1], 0.5)]);
        entries.insert((1, 1), vec![(vec![1], 0.5), (vec![-1], 0.5)]);
        let k = StripKernel { d: 1, n: 2, entries };
        assert!(matches!(k.check_irreducible(), Err(StripError::Reducible)));
    }

    #[test]
    fn rho_curve_homogeneous_family() {
        // F(r) = r F0 -> rho' = rho / r exactly.
        let base = srw_scalar(1.0);
        let family = move |r: f64| base.scaled(r);
        let pts = rho_curve(&family, None, &[0.5, 0.8, 1.1]).unwrap();
        for p in &pts {
            assert!((p.rho - p.r).abs() < 1e-10);
            assert!((p.rho_prime_eigen - p.rho / p.r).abs() < 1e-8);
        }
    }

    #[test]
    fn rho_curve_with_analytic_derivative() {
        let family = |r: f64| {
            StripKernel::scalar(1, vec![(vec![1], 0.3 * r), (vec![-1], 0.3 * r), (vec![0], 0.2 * r * r)])
        };
        let deriv = |r: f64| {
            StripKernel::scalar(1, vec![(vec![1], 0.3), (vec![-1], 0.3), (vec![0], 0.4 * r)])
        };
        let pts = rho_curve(&family, Some(&deriv), &[0.4, 0.9]).unwrap();
        for p in &pts {
            // rho(r) = 0.6 r + 0.2 r^2, rho' = 0.6 + 0.4 r.
            assert!((p.rho - (0.6 * p.r + 0.2 * p.r * p.r)).abs() < 1e-10);
            assert!((p.rho_prime_eigen - (0.6 + 0.4 * p.r)).abs() < 1e-8);
        }
    }

    #[test]
    fn lambda_midpoint_convexity() {
        let k = StripKernel::scalar(
            2,
            vec![
                (vec![1, 0], 0.2),
                (vec![-1, 0], 0.2),
                (vec![0, 1], 0.2),
                (vec![0, -1], 0.2),
                (vec![1, 1], 0.1),
                (vec![-1, -1], 0.1),
            ],
        );
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..30 {
            let u = [next(), next()];
            let w = [next(), next()];
            let mid = [(u[0] + w[0]) / 2.0, (u[1] + w[1]) / 2.0];
            let lm = dominant_eigen(&tilted_matrix(&k, &mid)).unwrap().lambda;
            let lu = dominant_eigen(&tilted_matrix(&k, &u)).unwrap().lambda;
            let lw = dominant_eigen(&tilted_matrix(&k, &w)).unwrap().lambda;
            assert!(lm <= 0.5 * (lu + lw) + 1e-10);
        }
    }

    #[test]
    fn scalar_srw_local_limit() {
        let k = srw_scalar(1.0);
        let steps = vec![125, 250, 500, 1000, 2000];
        let devs = strip_local_limit_check(&k, &[0.0], 0, &steps, 50_000_000).unwrap();
        for w in devs.windows(2) {
            assert!(w[1].1 < w[0].1, "not decreasing: {devs:?}");
        }
        let last = devs.last().unwrap();
        assert!(last.1 < 0.05, "s_2000 = {}", last.1);
    }

    #[test]
    fn strip_two_level_local_limit_trend() {
        // Aperiodic symmetric 2-strip kernel: lazy diagonal plus hops.
        let mut entries = HashMap::new();
        entries.insert((0, 0), vec![(vec![1], 0.3), (vec![-1], 0.3), (vec![0], 0.1)]);
        entries.insert((1, 1), vec![(vec![1], 0.2), (vec![-1], 0.2), (vec![0], 0.1)]);
        entries.insert((0, 1), vec![(vec![0], 0.3), (vec![1], 0.05)]);
        entries.insert((1, 0), vec![(vec![0], 0.3), (vec![-1], 0.05)]);
        let k = StripKernel { d: 1, n: 2, entries };
        assert!(k.is_symmetric());
        let (_, rho) = minimize_lambda(&k).unwrap();
        let kn = k.scaled(1.0 / rho);
        let steps = vec![64, 128, 256, 512];
        let devs = strip_local_limit_check(&kn, &[0.0], 0, &steps, 50_000_000).unwrap();
        for w in devs.windows(2) {
            assert!(w[1].1 < w[0].1 * 1.05, "trend broken: {devs:?}");
        }
        assert!(devs.last().unwrap().1 < 0.2, "{devs:?}");
    }

    #[test]
    fn degeneracy_margin_f2() {
        use crate::group::testkit::f2_srw;
        let solver = crate::excursion::Solver::with_order(&f2_srw(), 1024).unwrap();
        let rep = solver.locate_radius().unwrap();
        for p in 0..2 {
            let v = degeneracy_ladder(&solver, p, rep.radius).unwrap();
            assert!(!v.degenerate, "factor {p} wrongly degenerate: {v:?}");
            assert!(v.margin > 0.05, "margin={}", v.margin);
        }
    }
}
