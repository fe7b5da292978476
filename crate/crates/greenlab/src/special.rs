//! Special-function helpers: the upper incomplete gamma function for real
//! (possibly negative) order, and closed-form completions of power-law /
//! geometric tails `sum_{n >= N} n^{-a} s^n`.

/// ln Gamma via the Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let s = (std::f64::consts::PI * x).sin();
        return std::f64::consts::PI.ln() - s.abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x))
    } else {
        ln_gamma(x).exp()
    }
}

/// Regularized-by-hand lower incomplete gamma via its power series,
/// valid for s > 0, best for x < s + 1. Returns gamma(s, x) (lower).
fn lower_gamma_series(s: f64, x: f64) -> f64 {
    let mut term = 1.0 / s;
    let mut sum = term;
    let mut k = 1.0;
    while term.abs() > sum.abs() * 1e-17 && k < 10_000.0 {
        term *= x / (s + k);
        sum += term;
        k += 1.0;
    }
    sum * (-x + s * x.ln()).exp()
}

/// Upper incomplete gamma via the Lentz continued fraction,
/// valid for x > 0, best for x >= s + 1.
fn upper_gamma_cf(s: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - s;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - s);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    h * (-x + s * x.ln()).exp()
}

/// Upper incomplete gamma `Gamma(s, x)` for real `s` (any sign) and `x > 0`.
///
/// Negative orders are handled with the downward recurrence
/// `Gamma(s, x) = (Gamma(s+1, x) - x^s e^{-x}) / s`, which is stable for
/// x bounded away from 0 relative to |s|.
pub fn upper_gamma(s: f64, x: f64) -> f64 {
    assert!(x > 0.0, "upper_gamma requires x > 0");
    if s > 0.0 {
        if x < s + 1.0 {
            gamma(s) - lower_gamma_series(s, x)
        } else {
            upper_gamma_cf(s, x)
        }
    } else if s == s.floor() {
        // Integer s <= 0: the recurrence from a positive order would divide
        // by zero at s = 0, so anchor at Gamma(0, x) = E1(x) and step down.
        let steps = (-s) as usize;
        let mut g = exp_integral_e1(x);
        let mut si = 0.0;
        for _ in 0..steps {
            si -= 1.0;
            g = (g - x.powf(si) * (-x).exp()) / si;
        }
        g
    } else {
        // Lift to a positive order, then recurse down.
        let steps = (1.0 - s).ceil() as usize;
        let s_top = s + steps as f64;
        let mut g = upper_gamma(s_top, x);
        let mut si = s_top;
        for _ in 0..steps {
            si -= 1.0;
            g = (g - x.powf(si) * (-x).exp()) / si;
        }
        g
    }
}

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Exponential integral `E1(x) = Gamma(0, x)` for `x > 0`.
fn exp_integral_e1(x: f64) -> f64 {
    if x >= 1.0 {
        upper_gamma_cf(0.0, x)
    } else {
        // E1(x) = -gamma - ln x + sum_{k>=1} (-1)^{k+1} x^k / (k k!).
        let mut sum = -EULER_GAMMA - x.ln();
        let mut term = 1.0;
        for k in 1..200 {
            term *= -x / k as f64;
            sum -= term / k as f64;
            if term.abs() < 1e-18 * sum.abs().max(1.0) {
                break;
            }
        }
        sum
    }
}

/// Bernoulli numbers B_2, B_4, B_6 used in Euler-Maclaurin corrections.
const B2: f64 = 1.0 / 6.0;
const B4: f64 = -1.0 / 30.0;
const B6: f64 = 1.0 / 42.0;

/// Tail sum `sum_{n >= n0} n^{-a} s^n` for `s` in (0, 1], `n0 >= 1`.
///
/// For s < 1 this uses the integral `lambda^{a-1} Gamma(1-a, lambda n0)`
/// with `lambda = -ln s`, plus Euler-Maclaurin endpoint corrections; for
/// s = 1 (requires a > 1) the pure Euler-Maclaurin zeta tail. Returns the
/// value and a crude bound on the truncation error of the correction.
pub fn power_geometric_tail(a: f64, s: f64, n0: usize) -> (f64, f64) {
    assert!(s > 0.0 && s <= 1.0, "s must lie in (0,1]");
    assert!(n0 >= 1);
    let nn = n0 as f64;
    let f = |x: f64| x.powf(-a) * s.powf(x);
    if s == 1.0 {
        assert!(a > 1.0, "divergent tail: s = 1 needs a > 1");
        // sum_{n>=N} n^{-a} = N^{1-a}/(a-1) + N^{-a}/2 + ... (E-M at N).
        let integral = nn.powf(1.0 - a) / (a - 1.0);
        let c1 = 0.5 * nn.powf(-a);
        let c2 = B2 / 2.0 * a * nn.powf(-a - 1.0);
        let c3 = B4 / 24.0 * a * (a + 1.0) * (a + 2.0) * nn.powf(-a - 3.0);
        let c4 = B6 / 720.0 * a * (a + 1.0) * (a + 2.0) * (a + 3.0) * (a + 4.0) * nn.powf(-a - 5.0);
        return (integral + c1 + c2 + c3 + c4, c4.abs());
    }
    let lambda = -s.ln();
    if lambda * nn > 700.0 {
        return (0.0, 0.0);
    }
    // Integral: int_N^inf x^{-a} e^{-lambda x} dx = lambda^{a-1} Gamma(1-a, lambda N).
    // Compute in log space to dodge overflow of lambda^{a-1} for small lambda.
    let integral = (upper_gamma(1.0 - a, lambda * nn).ln() + (a - 1.0) * lambda.ln()).exp();
    let integral = if integral.is_finite() {
        integral
    } else {
        upper_gamma(1.0 - a, lambda * nn) * lambda.powf(a - 1.0)
    };
    // Derivatives of f at N for the E-M corrections.
    let f0 = f(nn);
    let g1 = -a / nn - lambda; // f'/f
    let f1 = f0 * g1;
    // f'' = f * (g1^2 + a/n^2), f''' = f * (g1^3 + 3 g1 a/n^2 - 2a/n^3)
    let f3 = f0 * (g1 * g1 * g1 + 3.0 * g1 * a / (nn * nn) - 2.0 * a / (nn * nn * nn));
    let f5 = {
        // Fifth derivative via the cumulant expansion of ln f; a few low-order
        // terms suffice since this only feeds the error estimate.
        let h2 = a / (nn * nn);
        let h3 = -2.0 * a / (nn * nn * nn);
        let h4 = 6.0 * a / (nn * nn * nn * nn);
        let g2 = g1 * g1 + h2;
        let g3 = g1 * g2 + 2.0 * g1 * h2 + h3 - 2.0 * g1 * h2; // = g1^3+3g1 h2+h3
        let _ = g3;
        f0 * (g1.powi(5)
            + 10.0 * g1.powi(3) * h2
            + 15.0 * g1 * h2 * h2
            + 10.0 * g1 * g1 * h3
            + 10.0 * h2 * h3
            + 5.0 * g1 * h4
            + 24.0 * a / nn.powi(5))
    };
    let value = integral + 0.5 * f0 - B2 / 2.0 * f1 - B4 / 24.0 * f3 - B6 / 720.0 * f5;
    (value, (B6 / 720.0 * f5).abs() + f0 * 1e-15)
}

/// Tail over even indices only: `sum_{n >= n0, n even} n^{-a} s^n`.
pub fn power_geometric_tail_even(a: f64, s: f64, n0: usize) -> (f64, f64) {
    let m0 = n0.div_ceil(2).max(1);
    let (v, e) = power_geometric_tail(a, s * s, m0);
    let scale = 2f64.powf(-a);
    (v * scale, e * scale)
}

/// ln of the binomial coefficient C(n, k).
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adaptive Simpson oracle for int_x^inf t^{s-1} e^{-t} dt.
    fn upper_gamma_quadrature(s: f64, x: f64) -> f64 {
        let f = |t: f64| t.powf(s - 1.0) * (-t).exp();
        // Integrate to a far cutoff; the integrand decays like e^{-t}.
        let hi = (x + 60.0 + 10.0 * s.abs()).max(80.0);
        let n = 400_000;
        let h = (hi - x) / n as f64;
        let mut sum = f(x) + f(hi);
        for i in 1..n {
            let t = x + i as f64 * h;
            sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        sum * h / 3.0
    }

    #[test]
    fn gamma_factorial() {
        assert!((gamma(5.0) - 24.0).abs() < 1e-10);
        assert!((gamma(0.5) - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn upper_gamma_positive_order_vs_quadrature() {
        for &(s, x) in &[(0.5, 0.3), (1.0, 2.0), (0.25, 5.0), (1.0, 0.1)] {
            let g = upper_gamma(s, x);
            let q = upper_gamma_quadrature(s, x);
            assert!((g - q).abs() < 1e-8 * q.abs().max(1.0), "s={s} x={x}: {g} vs {q}");
        }
    }

    #[test]
    fn upper_gamma_order_one_closed_form() {
        // Gamma(1, x) = e^{-x}
        for &x in &[0.1, 1.0, 5.0, 20.0] {
            assert!((upper_gamma(1.0, x) - (-x as f64).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn upper_gamma_integer_nonpositive_orders() {
        // Gamma(0, 1) = E1(1).
        assert!((upper_gamma(0.0, 1.0) - 0.21938393439552029).abs() < 1e-12);
        for &(s, x) in &[(0.0, 0.3), (0.0, 5.0), (-1.0, 0.8), (-2.0, 2.5)] {
            let g = upper_gamma(s, x);
            let q = upper_gamma_quadrature(s, x);
            assert!((g - q).abs() < 1e-7 * q.abs().max(1e-6), "s={s} x={x}: {g} vs {q}");
        }
    }

    #[test]
    fn upper_gamma_negative_order_vs_quadrature() {
        for &(s, x) in &[(-0.5, 0.7), (-1.5, 1.2), (-2.5, 0.4), (-0.25, 3.0)] {
            let g = upper_gamma(s, x);
            let q = upper_gamma_quadrature(s, x);
            assert!(
                (g - q).abs() < 1e-7 * q.abs().max(1e-6),
                "s={s} x={x}: {g} vs {q}"
            );
        }
    }

    #[test]
    fn tail_matches_direct_sum() {
        for &(a, s, n0) in &[(1.5, 0.9, 50usize), (2.5, 0.99, 100), (0.5, 0.7, 30), (3.0, 0.999, 200)]
        {
            let (v, _e) = power_geometric_tail(a, s, n0);
            let mut direct = 0.0;
            let mut n = n0;
            loop {
                let t = (n as f64).powf(-a) * s.powi(n as i32);
                direct += t;
                n += 1;
                if t < 1e-22 * direct.max(1e-300) || n > 5_000_000 {
                    break;
                }
            }
            assert!(
                (v - direct).abs() < 1e-9 * direct,
                "a={a} s={s} n0={n0}: closed {v} direct {direct}"
            );
        }
    }

    #[test]
    fn tail_at_s_one_matches_direct_sum() {
        for &(a, n0) in &[(2.5f64, 40usize), (1.5, 100), (3.5, 25)] {
            let (v, _e) = power_geometric_tail(a, 1.0, n0);
            let mut direct = 0.0;
            for n in n0..60_000_000 {
                direct += (n as f64).powf(-a);
            }
            // Complete the remainder of the direct sum with the integral bound.
            let rest = (60_000_000f64).powf(1.0 - a) / (a - 1.0);
            direct += rest;
            assert!((v - direct).abs() < 1e-8 * direct, "a={a} n0={n0}: {v} vs {direct}");
        }
    }

    #[test]
    fn even_tail_matches_direct_sum() {
        let (v, _) = power_geometric_tail_even(1.5, 0.95, 64);
        let mut direct = 0.0;
        let mut n = 64;
        while n < 4_000_000 {
            direct += (n as f64).powf(-1.5) * 0.95f64.powi(n);
            n += 2;
        }
        assert!((v - direct).abs() < 1e-10 * direct, "{v} vs {direct}");
    }

    #[test]
    fn binomial_small_values() {
        assert!((ln_binomial(10, 3).exp() - 120.0).abs() < 1e-9);
        assert!((ln_binomial(0, 0).exp() - 1.0).abs() < 1e-12);
    }
}
