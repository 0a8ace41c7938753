//! NMSE and resiliency experiments.

use super::worker::{PrelimMode, RoundContext, ThcWorker};
use super::{GradientSource, HarnessError, LeastSquaresProblem};
use crate::aggregator::{Aggregator, PsConfig};
use crate::codec::{self, check_overflow};
use crate::hadamard::{self, TransformSeed};
use crate::seed::{self, TAG_SQ};
use crate::simnet::{
    periodic_sync, run_round, NetConfig, RoundReport, RoundWorker, StragglerPolicy,
};
use crate::tables::{solve_optimal_table, LookupTable, TableKey};

/// NMSE experiment configuration: one log-normal gradient per trial, copied
/// to every worker, pushed through the full compress/aggregate/decompress
/// pipeline, and compared against the original.
#[derive(Debug, Clone)]
pub struct NmseParams {
    pub workers: u16,
    pub dim: usize,
    pub trials: u32,
    pub base_seed: u64,
}

impl Default for NmseParams {
    fn default() -> Self {
        Self {
            workers: 10,
            dim: 4096,
            trials: 100,
            base_seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmseStats {
    pub mean: f64,
    pub per_trial: Vec<f64>,
}

/// How the clamp range is derived for a single pipeline pass.
pub(crate) enum ScaleRule {
    /// `M = t_p ||x|| / sqrt(d)`, `m = -M` (the production preliminary stage).
    NormDerived,
    /// Fixed range, for exactness tests on grid-valued inputs.
    #[allow(dead_code)]
    Explicit { m: f64, max: f64 },
}

/// One pre-process -> encode(xN) -> aggregate -> decode -> post-process pass.
/// Returns `||xhat - x||^2 / ||x||^2`.
pub(crate) fn nmse_single_trial(
    x: &[f64],
    table: &LookupTable,
    workers: u16,
    trial: u64,
    base_seed: u64,
    rule: ScaleRule,
) -> Result<f64, HarnessError> {
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Ok(0.0);
    }
    let (padded, original_len) = hadamard::pad_pow2(x);
    let d = padded.len();
    let seed = TransformSeed::new(base_seed, trial);
    let transformed = hadamard::rht(&padded, seed)?;
    let (m, max) = match rule {
        ScaleRule::NormDerived => {
            let ell = padded.iter().map(|v| v * v).sum::<f64>().sqrt();
            hadamard::range_from_norm(ell, d, table.t_p)
        }
        ScaleRule::Explicit { m, max } => (m, max),
    };
    if !(m < max) {
        return Err(HarnessError::Config(format!(
            "degenerate clamp range [{m}, {max}]"
        )));
    }
    check_overflow(table.key.granularity, workers, 16)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let pre = hadamard::PreprocessedVector {
        data: hadamard::clamp(&transformed, m, max)?,
        original_len,
        scale_m: m,
        scale_max: max,
    };
    let encoded: Vec<_> = (0..workers)
        .map(|w| {
            codec::thc_encode(
                &pre.data,
                pre.scale_m,
                pre.scale_max,
                table,
                seed::derive_seed(base_seed, &[TAG_SQ, w as u64, trial, 0]),
                trial as u32,
                w,
            )
        })
        .collect::<Result<_, _>>()?;
    let payload = codec::table_lookup_sum(&encoded, table, 16)?;
    let estimate = codec::decode_aggregate(&payload)?;
    let restored = hadamard::rht_inverse(&estimate, seed)?;
    let err: f64 = restored[..pre.original_len]
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(err / energy)
}

/// Mean NMSE over `trials` log-normal draws.
pub fn nmse_experiment(
    table: &LookupTable,
    params: &NmseParams,
) -> Result<NmseStats, HarnessError> {
    if params.workers == 0 || params.dim == 0 || params.trials == 0 {
        return Err(HarnessError::Config(
            "workers, dim, and trials must all be positive".into(),
        ));
    }
    let source = GradientSource::Lognormal {
        dim: params.dim,
        draw_seed: params.base_seed,
    };
    let mut per_trial = Vec::with_capacity(params.trials as usize);
    for t in 0..params.trials {
        let x = source.gradient(&[], t);
        per_trial.push(nmse_single_trial(
            &x,
            table,
            params.workers,
            t as u64,
            params.base_seed,
            ScaleRule::NormDerived,
        )?);
    }
    let mean = per_trial.iter().sum::<f64>() / per_trial.len() as f64;
    Ok(NmseStats { mean, per_trial })
}

/// Whether a resiliency run compresses at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Exact gradient averaging (no compression, no network).
    Baseline,
    /// Full pipeline over the simulated network.
    Thc,
}

#[derive(Debug, Clone)]
pub struct ResiliencyParams {
    pub mode: RunMode,
    pub workers: u16,
    pub dim: usize,
    pub rows_per_worker: usize,
    /// Target noise in `y = A w + noise`; keeps the optimum value positive.
    pub noise: f64,
    pub rounds: u32,
    /// Model sync every this many rounds; 0 disables.
    pub sync_period: u32,
    /// Step size as a fraction of `1/L`.
    pub eta_scale: f64,
    pub loss_rate: f64,
    /// Random stragglers per round.
    pub stragglers: usize,
    pub threshold: f64,
    pub bits: u8,
    pub granularity: u32,
    pub p_num: u64,
    pub p_den: u64,
    pub chunk_size: usize,
    pub value_width: u8,
    pub base_seed: u64,
    /// The final gap is averaged over this many trailing rounds.
    pub tail_window: u32,
}

impl Default for ResiliencyParams {
    fn default() -> Self {
        // packet-loss/straggler study configuration: 10 workers,
        // granularity 20, p = 1/512, 4-bit budget
        Self {
            mode: RunMode::Thc,
            workers: 10,
            dim: 256,
            rows_per_worker: 102,
            noise: 0.5,
            rounds: 500,
            sync_period: 0,
            eta_scale: 0.1,
            loss_rate: 0.0,
            stragglers: 0,
            threshold: 1.0,
            bits: 4,
            granularity: 20,
            p_num: 1,
            p_den: 512,
            chunk_size: 64,
            value_width: 8,
            base_seed: 7,
            tail_window: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResiliencyTrace {
    /// `f(mean model)` per round.
    pub objectives: Vec<f64>,
    /// `objectives - f_star`.
    pub gaps: Vec<f64>,
    pub f_star: f64,
    /// Mean of `gaps` over the last `tail_window` rounds - the settled
    /// stochastic floor of the run.
    pub final_gap: f64,
    /// Per-round network reports (empty in baseline mode).
    pub reports: Vec<RoundReport>,
    /// Distinct update fingerprints per round (1 = workers in lockstep).
    pub divergence: Vec<usize>,
}

/// Train the synthetic least-squares objective and trace the gap per round.
pub fn resiliency_experiment(params: &ResiliencyParams) -> Result<ResiliencyTrace, HarnessError> {
    if params.rounds == 0 || params.workers == 0 {
        return Err(HarnessError::Config(
            "rounds and workers must be positive".into(),
        ));
    }
    let problem = LeastSquaresProblem::synthetic(
        params.workers,
        params.rows_per_worker,
        params.dim,
        params.noise,
        params.base_seed,
    );
    let (_, f_star) = problem.optimum()?;
    let eta = params.eta_scale / problem.lipschitz();

    let mut objectives = Vec::with_capacity(params.rounds as usize);
    let mut reports = Vec::new();
    let mut divergence = Vec::with_capacity(params.rounds as usize);
    let tail = (params.tail_window as usize).clamp(1, params.rounds as usize);
    let tail_start = params.rounds as usize - tail;
    let mut tail_model = vec![0.0; params.dim];

    match params.mode {
        RunMode::Baseline => {
            let mut w = vec![0.0; params.dim];
            for round in 0..params.rounds as usize {
                let g = problem.full_gradient(&w);
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= eta * gi;
                }
                objectives.push(problem.objective(&w));
                divergence.push(1);
                if round >= tail_start {
                    for (t, v) in tail_model.iter_mut().zip(&w) {
                        *t += v / tail as f64;
                    }
                }
            }
        }
        RunMode::Thc => {
            let key = TableKey::new(params.bits, params.granularity, params.p_num, params.p_den)?;
            let table = solve_optimal_table(&key, 1e-12)?;
            let ctx = RoundContext {
                base_seed: params.base_seed,
                num_workers: params.workers,
                table: table.clone(),
                prelim_mode: PrelimMode::Norm,
                chunk_size: params.chunk_size,
                eta,
            };
            let mut workers: Vec<ThcWorker> = problem
                .blocks
                .iter()
                .enumerate()
                .map(|(w, block)| {
                    ThcWorker::new(
                        w as u16,
                        ctx.clone(),
                        GradientSource::LeastSquares(block.clone()),
                        vec![0.0; params.dim],
                    )
                })
                .collect();
            let chunks = workers[0].num_chunks() as u32;
            let mut agg = Aggregator::new(PsConfig::new(
                table,
                params.workers,
                params.value_width,
                params.threshold,
                chunks,
            )?);
            let net = NetConfig {
                loss_rate: params.loss_rate,
                straggler_policy: if params.stragglers > 0 {
                    StragglerPolicy::RandomPerRound(params.stragglers)
                } else {
                    StragglerPolicy::None
                },
                seed: params.base_seed,
                ..NetConfig::default()
            };
            for round in 0..params.rounds {
                let report = run_round(&mut workers, &mut agg, &net, round)?;
                let mut distinct = report.fingerprints.clone();
                distinct.sort_unstable();
                distinct.dedup();
                divergence.push(distinct.len());
                reports.push(report);

                let mut mean = vec![0.0; params.dim];
                for w in &workers {
                    for (m, v) in mean.iter_mut().zip(w.model()) {
                        *m += v / params.workers as f64;
                    }
                }
                objectives.push(problem.objective(&mean));
                if round as usize >= tail_start {
                    for (t, v) in tail_model.iter_mut().zip(&mean) {
                        *t += v / tail as f64;
                    }
                }

                if params.sync_period > 0 {
                    periodic_sync(&mut workers, round, params.sync_period);
                }
            }
        }
    }

    let gaps: Vec<f64> = objectives.iter().map(|o| o - f_star).collect();
    let final_gap = gaps[tail_start..].iter().sum::<f64>() / tail as f64;
    let _ = tail_model;
    Ok(ResiliencyTrace {
        objectives,
        gaps,
        f_star,
        final_gap,
        reports,
        divergence,
    })
}
