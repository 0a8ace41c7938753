//! Shared oracles for the integration suites, independent of the library's
//! production paths: a closed-form layered shortest-path optimizer for lookup
//! tables, a Monte Carlo variance estimator, and small statistics helpers.
#![allow(dead_code)]

use rand::Rng;
use thc::hadamard::{normal_cdf, normal_pdf};

/// Closed-form `integral_{c0}^{c1} (a-c0)(c1-a) phi(a) da` from normal
/// moments (no quadrature).
pub fn closed_form_interval_cost(c0: f64, c1: f64) -> f64 {
    let m0 = normal_cdf(c1) - normal_cdf(c0);
    let m1 = normal_pdf(c0) - normal_pdf(c1);
    let m2 = m0 + c0 * normal_pdf(c0) - c1 * normal_pdf(c1);
    -m2 + (c0 + c1) * m1 - c0 * c1 * m0
}

/// Exact unconstrained optimum by dynamic programming over grid values -
/// a different optimizer and a different integrator than the solver.
pub fn dp_optimal_variance(bits: u8, g: u32, t_p: f64) -> f64 {
    let scale = |v: usize| 2.0 * t_p * v as f64 / g as f64 - t_p;
    let layers = 1usize << bits;
    let n = (g + 1) as usize;
    let mut dp = vec![f64::INFINITY; n];
    dp[0] = 0.0;
    for _ in 1..layers {
        let mut next = vec![f64::INFINITY; n];
        for v in 1..n {
            for u in 0..v {
                if dp[u].is_finite() {
                    let c = dp[u] + closed_form_interval_cost(scale(u), scale(v));
                    if c < next[v] {
                        next[v] = c;
                    }
                }
            }
        }
        dp = next;
    }
    dp[n - 1]
}

/// One standard normal via Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-sample squared stochastic-quantization errors for `table` against the
/// shared draws `(a_k, coin_k)`; zero outside `[-t_p, t_p]` (matching the
/// objective's unnormalized restriction).
pub fn mc_sq_errors(table: &[u32], g: u32, t_p: f64, draws: &[(f64, f64)]) -> Vec<f64> {
    let q: Vec<f64> = table
        .iter()
        .map(|&v| 2.0 * t_p * v as f64 / g as f64 - t_p)
        .collect();
    draws
        .iter()
        .map(|&(a, coin)| {
            if a.abs() > t_p {
                return 0.0;
            }
            let hi = q.partition_point(|&v| v <= a).min(q.len() - 1);
            let lo = hi - 1;
            let frac = (a - q[lo]) / (q[hi] - q[lo]);
            let picked = if coin < frac { q[hi] } else { q[lo] };
            (picked - a) * (picked - a)
        })
        .collect()
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
