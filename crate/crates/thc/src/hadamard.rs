//! Orthonormal Walsh-Hadamard machinery for pre- and post-processing.
//!
//! The randomized Hadamard transform `RHT(x) = H·D·x` (with `H` the
//! orthonormal Hadamard matrix and `D` a Rademacher diagonal) spreads a
//! vector's energy evenly across coordinates, shrinking the value range before
//! quantization. The inverse is `D·H·x`. The orthonormal convention (the
//! `1/sqrt(2)` folded into every butterfly) makes both directions exactly
//! norm-preserving, so the clamp range can be derived from the vector norm
//! alone: `M = t_p * ||x|| / sqrt(d)`, `m = -M`.
//!
//! All parties derive the per-round diagonal from a shared
//! [`TransformSeed`]; averaging in transformed space is only meaningful when
//! every worker applies the same `D`.

use crate::seed::{self, TAG_RHT_DIAG};
use rand::Rng;
use std::f64::consts::FRAC_1_SQRT_2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HadamardError {
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("invalid clamp range: m={m} > M={max}")]
    InvalidRange { m: f64, max: f64 },
    #[error("support fraction p={0} outside (0, 1)")]
    InvalidFraction(f64),
}

/// Shared identity of the per-round Rademacher diagonal.
///
/// Two parties holding equal `(base_seed, round)` derive bit-identical
/// diagonals; the stream seed is `derive_seed(base_seed, [TAG_RHT_DIAG, round])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformSeed {
    pub base_seed: u64,
    pub round: u64,
}

impl TransformSeed {
    pub fn new(base_seed: u64, round: u64) -> Self {
        Self { base_seed, round }
    }

    fn stream_seed(&self) -> u64 {
        seed::derive_seed(self.base_seed, &[TAG_RHT_DIAG, self.round])
    }
}

/// A padded, transformed, and clamped vector together with its scale metadata.
#[derive(Debug, Clone)]
pub struct PreprocessedVector {
    /// Transformed data, power-of-two length, every entry in `[scale_m, scale_M]`.
    pub data: Vec<f64>,
    /// Length of the original vector before zero-padding.
    pub original_len: usize,
    /// Lower clamp bound `m`.
    pub scale_m: f64,
    /// Upper clamp bound `M` (`-scale_m` when norm-derived).
    pub scale_max: f64,
}

/// In-place orthonormal fast Walsh-Hadamard transform.
///
/// Each butterfly pair is scaled by `1/sqrt(2)`, so the full transform
/// preserves the Euclidean norm and is its own inverse.
pub fn fwht_in_place(x: &mut [f64]) -> Result<(), HadamardError> {
    let d = x.len();
    if !d.is_power_of_two() {
        return Err(HadamardError::NotPowerOfTwo(d));
    }
    let mut half = 1;
    while half < d {
        for block in (0..d).step_by(half * 2) {
            for i in block..block + half {
                let a = x[i];
                let b = x[i + half];
                x[i] = (a + b) * FRAC_1_SQRT_2;
                x[i + half] = (a - b) * FRAC_1_SQRT_2;
            }
        }
        half *= 2;
    }
    Ok(())
}

/// Orthonormal FWHT of a power-of-two-length vector.
pub fn fwht(x: &[f64]) -> Result<Vec<f64>, HadamardError> {
    let mut out = x.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// The deterministic Rademacher diagonal for `(seed, d)`: `d` signs in {-1, +1}.
pub fn rademacher_diag(seed: TransformSeed, d: usize) -> Vec<f64> {
    let mut rng = seed::stream(seed.stream_seed());
    let mut out = Vec::with_capacity(d);
    let mut word = 0u64;
    for i in 0..d {
        if i % 64 == 0 {
            word = rng.random::<u64>();
        }
        let bit = (word >> (i % 64)) & 1;
        out.push(if bit == 1 { 1.0 } else { -1.0 });
    }
    out
}

/// Randomized Hadamard transform `H·D·x` with the round's shared diagonal.
pub fn rht(x: &[f64], seed: TransformSeed) -> Result<Vec<f64>, HadamardError> {
    if !x.len().is_power_of_two() {
        return Err(HadamardError::NotPowerOfTwo(x.len()));
    }
    let diag = rademacher_diag(seed, x.len());
    let mut out: Vec<f64> = x.iter().zip(&diag).map(|(v, s)| v * s).collect();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// Inverse transform `D·H·x`; `rht_inverse(rht(x, s), s) = x` up to rounding.
pub fn rht_inverse(y: &[f64], seed: TransformSeed) -> Result<Vec<f64>, HadamardError> {
    if !y.len().is_power_of_two() {
        return Err(HadamardError::NotPowerOfTwo(y.len()));
    }
    let mut out = y.to_vec();
    fwht_in_place(&mut out)?;
    let diag = rademacher_diag(seed, y.len());
    for (v, s) in out.iter_mut().zip(&diag) {
        *v *= s;
    }
    Ok(out)
}

/// Zero-pad to the next power of two; returns the padded vector and the
/// original length so the inverse truncation is exact.
pub fn pad_pow2(x: &[f64]) -> (Vec<f64>, usize) {
    let original_len = x.len();
    let target = original_len.max(1).next_power_of_two();
    let mut out = x.to_vec();
    out.resize(target, 0.0);
    (out, original_len)
}

/// Inverse of [`pad_pow2`]: drop the zero padding.
pub fn unpad(x: &[f64], original_len: usize) -> Vec<f64> {
    x[..original_len].to_vec()
}

/// Entrywise clamp to `[m, max]`.
pub fn clamp(x: &[f64], m: f64, max: f64) -> Result<Vec<f64>, HadamardError> {
    if m > max {
        return Err(HadamardError::InvalidRange { m, max });
    }
    Ok(x.iter().map(|&v| v.min(max).max(m)).collect())
}

/// Standard-normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard-normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Clamp threshold `t_p = Phi^{-1}(1 - p/2)` in standard-normal units: at most
/// a `p`-fraction of transformed (and scaled) coordinates is expected outside
/// `[-t_p, t_p]`.
///
/// Inversion is Acklam's rational approximation refined by two Halley steps
/// against the erfc-based CDF; absolute error is far below the 1e-9 contract.
pub fn compute_tp(p: f64) -> Result<f64, HadamardError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(HadamardError::InvalidFraction(p));
    }
    Ok(inverse_normal_cdf(1.0 - p / 2.0))
}

fn inverse_normal_cdf(q: f64) -> f64 {
    debug_assert!(q > 0.0 && q < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const Q_LOW: f64 = 0.02425;

    let mut x = if q < Q_LOW {
        let u = (-2.0 * q.ln()).sqrt();
        (((((C[0] * u + C[1]) * u + C[2]) * u + C[3]) * u + C[4]) * u + C[5])
            / ((((D[0] * u + D[1]) * u + D[2]) * u + D[3]) * u + 1.0)
    } else if q <= 1.0 - Q_LOW {
        let u = q - 0.5;
        let r = u * u;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * u
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let u = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C[0] * u + C[1]) * u + C[2]) * u + C[3]) * u + C[4]) * u + C[5])
            / ((((D[0] * u + D[1]) * u + D[2]) * u + D[3]) * u + 1.0)
    };
    for _ in 0..2 {
        let err = normal_cdf(x) - q;
        let u = err / normal_pdf(x);
        x -= u / (1.0 + x * u / 2.0);
    }
    x
}

/// Norm-derived clamp range: `M = t_p * ell / sqrt(d)`, `m = -M`.
pub fn range_from_norm(ell: f64, d: usize, t_p: f64) -> (f64, f64) {
    let max = t_p * ell / (d as f64).sqrt();
    (-max, max)
}
