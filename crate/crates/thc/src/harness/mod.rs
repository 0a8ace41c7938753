//! End-to-end training driver and the two experiment families.
//!
//! [`ThcWorker`] runs the full per-round pipeline (error feedback, norm or
//! min/max preliminary, RHT, clamp, encode, aggregate via the simulated
//! network, decode, inverse RHT, model update). [`nmse_experiment`] measures
//! reconstruction error of the compression pipeline on replicated log-normal
//! gradients; [`resiliency_experiment`] trains a synthetic least-squares
//! objective under packet loss, stragglers, partial aggregation, and periodic
//! model synchronization.

mod experiments;
mod worker;

pub use experiments::{
    nmse_experiment, resiliency_experiment, NmseParams, NmseStats, ResiliencyParams,
    ResiliencyTrace, RunMode,
};
pub use worker::{PrelimMode, RoundContext, ThcWorker};

use crate::aggregator::AggError;
use crate::codec::CodecError;
use crate::hadamard::HadamardError;
use crate::seed::{self, TAG_GRADIENT};
use crate::simnet::SimError;
use crate::tables::TableError;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("harness config error: {0}")]
    Config(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Hadamard(#[from] HadamardError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Aggregator(#[from] AggError),
}

/// Where a worker's per-round gradient comes from.
#[derive(Debug, Clone)]
pub enum GradientSource {
    /// The same vector every round (and for every worker sharing it).
    Fixed(Vec<f64>),
    /// Per-round log-normal draw, `exp(N(0,1))` with a random sign per
    /// coordinate. The draw depends only on `(draw_seed, round)`, so workers
    /// sharing `draw_seed` see identical copies.
    Lognormal { dim: usize, draw_seed: u64 },
    /// Per-round standard normal draw, same sharing rule.
    Gaussian { dim: usize, draw_seed: u64 },
    /// Least-squares block: gradient of `||A w - y||^2 / (2 rows)`.
    LeastSquares(LeastSquaresBlock),
}

impl GradientSource {
    pub fn dim(&self) -> usize {
        match self {
            GradientSource::Fixed(x) => x.len(),
            GradientSource::Lognormal { dim, .. } | GradientSource::Gaussian { dim, .. } => *dim,
            GradientSource::LeastSquares(b) => b.dim,
        }
    }

    pub fn gradient(&self, model: &[f64], round: u32) -> Vec<f64> {
        match self {
            GradientSource::Fixed(x) => x.clone(),
            GradientSource::Lognormal { dim, draw_seed } => {
                let mut rng =
                    seed::stream(seed::derive_seed(*draw_seed, &[TAG_GRADIENT, round as u64]));
                (0..*dim)
                    .map(|_| {
                        let z = standard_normal(&mut rng);
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        sign * z.exp()
                    })
                    .collect()
            }
            GradientSource::Gaussian { dim, draw_seed } => {
                let mut rng =
                    seed::stream(seed::derive_seed(*draw_seed, &[TAG_GRADIENT, round as u64]));
                (0..*dim).map(|_| standard_normal(&mut rng)).collect()
            }
            GradientSource::LeastSquares(b) => b.gradient(model),
        }
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller, one value per call
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One worker's share of a distributed least-squares problem.
#[derive(Debug, Clone)]
pub struct LeastSquaresBlock {
    /// `rows x dim`, row-major.
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
}

impl LeastSquaresBlock {
    /// `f_i(w) = ||A w - y||^2 / (2 rows)`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        self.residual_sq(w) / (2.0 * self.rows as f64)
    }

    fn residual_sq(&self, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.rows {
            let row = &self.a[r * self.dim..(r + 1) * self.dim];
            let pred: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            let e = pred - self.y[r];
            acc += e * e;
        }
        acc
    }

    /// `grad f_i = A^T (A w - y) / rows`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for r in 0..self.rows {
            let row = &self.a[r * self.dim..(r + 1) * self.dim];
            let pred: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            let e = (pred - self.y[r]) / self.rows as f64;
            for (o, a) in out.iter_mut().zip(row) {
                *o += e * a;
            }
        }
        out
    }
}

/// A synthetic convex problem split across workers, with its closed-form
/// optimum available for gap measurements.
#[derive(Debug, Clone)]
pub struct LeastSquaresProblem {
    pub blocks: Vec<LeastSquaresBlock>,
    pub dim: usize,
}

impl LeastSquaresProblem {
    /// Random Gaussian design, `y = A w_true + noise`.
    pub fn synthetic(
        workers: u16,
        rows_per_worker: usize,
        dim: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seed::stream(seed::derive_seed(seed, &[TAG_GRADIENT, u64::MAX]));
        let w_true: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
        let blocks = (0..workers)
            .map(|_| {
                let mut a = Vec::with_capacity(rows_per_worker * dim);
                let mut y = Vec::with_capacity(rows_per_worker);
                for _ in 0..rows_per_worker {
                    let row: Vec<f64> = (0..dim)
                        .map(|_| standard_normal(&mut rng) / (dim as f64).sqrt())
                        .collect();
                    let clean: f64 = row.iter().zip(&w_true).map(|(a, b)| a * b).sum();
                    y.push(clean + noise * standard_normal(&mut rng));
                    a.extend(row);
                }
                LeastSquaresBlock {
                    a,
                    y,
                    rows: rows_per_worker,
                    dim,
                }
            })
            .collect();
        Self { blocks, dim }
    }

    /// `f(w) = (1/n) sum_i f_i(w)`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        self.blocks.iter().map(|b| b.objective(w)).sum::<f64>() / self.blocks.len() as f64
    }

    /// `(1/n) sum_i grad f_i(w)`.
    pub fn full_gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for b in &self.blocks {
            for (o, g) in out.iter_mut().zip(b.gradient(w)) {
                *o += g / self.blocks.len() as f64;
            }
        }
        out
    }

    /// Hessian `H = (1/n) sum_i A_i^T A_i / rows_i` as a dense matrix.
    fn hessian(&self) -> nalgebra::DMatrix<f64> {
        let d = self.dim;
        let mut h = nalgebra::DMatrix::<f64>::zeros(d, d);
        for b in &self.blocks {
            let scale = 1.0 / (self.blocks.len() as f64 * b.rows as f64);
            for r in 0..b.rows {
                let row = &b.a[r * d..(r + 1) * d];
                for i in 0..d {
                    for j in i..d {
                        let v = row[i] * row[j] * scale;
                        h[(i, j)] += v;
                        if i != j {
                            h[(j, i)] += v;
                        }
                    }
                }
            }
        }
        h
    }

    /// Closed-form minimizer and minimum value via the normal equations.
    pub fn optimum(&self) -> Result<(Vec<f64>, f64), HarnessError> {
        let d = self.dim;
        let h = self.hessian();
        let mut rhs = nalgebra::DVector::<f64>::zeros(d);
        for b in &self.blocks {
            let scale = 1.0 / (self.blocks.len() as f64 * b.rows as f64);
            for r in 0..b.rows {
                let row = &b.a[r * d..(r + 1) * d];
                for i in 0..d {
                    rhs[i] += row[i] * b.y[r] * scale;
                }
            }
        }
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| HarnessError::Config("normal equations not SPD".into()))?;
        let w = chol.solve(&rhs);
        let w_vec: Vec<f64> = w.iter().copied().collect();
        let f_star = self.objective(&w_vec);
        Ok((w_vec, f_star))
    }

    /// Largest Hessian eigenvalue by power iteration - the smoothness
    /// constant used to scale the step size.
    pub fn lipschitz(&self) -> f64 {
        let h = self.hessian();
        let d = self.dim;
        let mut v = nalgebra::DVector::<f64>::from_element(d, 1.0 / (d as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..100 {
            let hv = &h * &v;
            lambda = hv.norm();
            if lambda == 0.0 {
                return 0.0;
            }
            v = hv / lambda;
        }
        lambda
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lognormal_copies_are_shared_and_signed() {
        let s = GradientSource::Lognormal {
            dim: 64,
            draw_seed: 5,
        };
        let a = s.gradient(&[], 3);
        let b = s.gradient(&[], 3);
        assert_eq!(a, b);
        assert_ne!(a, s.gradient(&[], 4));
        assert!(a.iter().any(|&v| v < 0.0) && a.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn least_squares_optimum_zeroes_the_gradient() {
        let p = LeastSquaresProblem::synthetic(4, 40, 16, 0.3, 11);
        let (w_star, f_star) = p.optimum().unwrap();
        let g = p.full_gradient(&w_star);
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(gnorm < 1e-10, "gradient norm at optimum {gnorm}");
        assert!(f_star > 0.0); // noisy targets keep the floor positive
                               // any perturbation increases the objective
        let mut w = w_star.clone();
        w[0] += 0.1;
        assert!(p.objective(&w) > f_star);
    }

    #[test]
    fn lipschitz_bounds_gradient_curvature() {
        let p = LeastSquaresProblem::synthetic(2, 50, 8, 0.1, 3);
        let l = p.lipschitz();
        // descent with eta = 1/L must not diverge
        let mut w = vec![0.0; 8];
        let mut prev = p.objective(&w);
        for _ in 0..50 {
            let g = p.full_gradient(&w);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= gi / l;
            }
            let cur = p.objective(&w);
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }
}
