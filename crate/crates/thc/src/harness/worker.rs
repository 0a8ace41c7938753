//! The per-worker training-round pipeline.
//!
//! Each round, a worker:
//!
//! 1. computes its local gradient and adds the carried error feedback,
//!    `x = grad + e`;
//! 2. sends its scale summary (norm `||x||`, or min/max of the transformed
//!    vector) and in parallel computes `R = RHT(x)` with the round's shared
//!    diagonal;
//! 3. derives the global clamp range from the reply, clamps, encodes each
//!    chunk, and transmits;
//! 4. decodes the aggregated results (zero-filling chunks that timed out),
//!    applies the inverse transform, and steps the model;
//! 5. updates the error feedback from its *own* quantization,
//!    `e' = x - RHT^{-1}(X)`, carrying clamp and rounding error forward.

use super::GradientSource;
use crate::codec::{self, AggregatedPayload, EncodedGradient, Scale};
use crate::hadamard::{self, TransformSeed};
use crate::protocol::{GradientPacket, PrelimPacket, PrelimValue, ResultPacket};
use crate::seed::{self, TAG_SQ};
use crate::simnet::{fingerprint, RoundWorker, WorkerRoundOutcome};
use crate::tables::LookupTable;

/// How the preliminary stage summarizes scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrelimMode {
    /// Min/max of the transformed vector; clamping never truncates.
    MinMax,
    /// Gradient norm; range `[-t_p l/sqrt(d), t_p l/sqrt(d)]` clamps roughly a
    /// `p`-fraction of coordinates.
    Norm,
}

/// Static per-run configuration shared by all workers.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub base_seed: u64,
    pub num_workers: u16,
    /// Solved lookup table; the identity table gives uniform THC.
    pub table: LookupTable,
    pub prelim_mode: PrelimMode,
    /// Coordinates per gradient packet (one aggregation slot each).
    pub chunk_size: usize,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChunkState {
    Pending,
    Resolved,
}

#[derive(Debug)]
pub struct ThcWorker {
    id: u16,
    ctx: RoundContext,
    source: GradientSource,
    model: Vec<f64>,
    /// Error feedback in the padded (transform) domain.
    error_feedback: Vec<f64>,
    padded_dim: usize,

    round: u32,
    x: Vec<f64>,
    transformed: Vec<f64>,
    scale: Scale,
    degenerate: bool,
    encoded: Vec<Option<EncodedGradient>>,
    estimate: Vec<f64>,
    chunk_state: Vec<ChunkState>,
    zero_filled: u32,
    last_update: Vec<f64>,
}

impl ThcWorker {
    pub fn new(id: u16, ctx: RoundContext, source: GradientSource, model: Vec<f64>) -> Self {
        assert_eq!(source.dim(), model.len(), "source and model dims differ");
        let padded_dim = model.len().max(1).next_power_of_two();
        let chunks = padded_dim.div_ceil(ctx.chunk_size);
        Self {
            id,
            ctx,
            source,
            model,
            error_feedback: vec![0.0; padded_dim],
            padded_dim,
            round: 0,
            x: Vec::new(),
            transformed: Vec::new(),
            scale: Scale { m: 0.0, max: 0.0 },
            degenerate: false,
            encoded: vec![None; chunks],
            estimate: vec![0.0; padded_dim],
            chunk_state: vec![ChunkState::Pending; chunks],
            zero_filled: 0,
            last_update: Vec::new(),
        }
    }

    pub fn num_chunks(&self) -> usize {
        self.chunk_state.len()
    }

    fn chunk_range(&self, chunk: usize) -> std::ops::Range<usize> {
        let lo = chunk * self.ctx.chunk_size;
        lo..(lo + self.ctx.chunk_size).min(self.padded_dim)
    }

    /// The update applied by the last `finish_round`, in model coordinates.
    pub fn last_update(&self) -> &[f64] {
        &self.last_update
    }

    pub fn error_feedback(&self) -> &[f64] {
        &self.error_feedback
    }

    /// This round's pre-processed input `x = pad(grad) + e`, for tests.
    pub fn current_input(&self) -> &[f64] {
        &self.x
    }

    fn transform_seed(&self) -> TransformSeed {
        TransformSeed::new(self.ctx.base_seed, self.round as u64)
    }

    fn sq_seed(&self, chunk: usize) -> u64 {
        seed::derive_seed(
            self.ctx.base_seed,
            &[TAG_SQ, self.id as u64, self.round as u64, chunk as u64],
        )
    }
}

impl RoundWorker for ThcWorker {
    fn worker_id(&self) -> u16 {
        self.id
    }

    fn prelim(&mut self, round: u32) -> PrelimPacket {
        self.round = round;
        self.zero_filled = 0;
        self.estimate = vec![0.0; self.padded_dim];
        self.chunk_state = vec![ChunkState::Pending; self.num_chunks()];
        self.encoded = vec![None; self.num_chunks()];
        self.degenerate = false;

        let grad = self.source.gradient(&self.model, round);
        let (mut x, _) = hadamard::pad_pow2(&grad);
        for (xi, e) in x.iter_mut().zip(&self.error_feedback) {
            *xi += e;
        }
        // RHT runs alongside the norm exchange; both are available before
        // the reply arrives.
        self.transformed = hadamard::rht(&x, self.transform_seed()).expect("padded to pow2");
        let value = match self.ctx.prelim_mode {
            PrelimMode::Norm => {
                let ell = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                PrelimValue::Norm(ell)
            }
            PrelimMode::MinMax => {
                let m = self
                    .transformed
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                let max = self
                    .transformed
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                PrelimValue::MinMax { m, max }
            }
        };
        self.x = x;
        PrelimPacket {
            to_server: true,
            round_num: round,
            num_worker: self.ctx.num_workers,
            worker_id: self.id,
            value,
        }
    }

    fn on_prelim_reply(&mut self, reply: &PrelimPacket) -> Vec<GradientPacket> {
        let (m, max) = match reply.value {
            PrelimValue::Norm(ell) => {
                hadamard::range_from_norm(ell, self.padded_dim, self.ctx.table.t_p)
            }
            PrelimValue::MinMax { m, max } => (m, max),
        };
        self.scale = Scale { m, max };
        if !(m < max) {
            // Zero (or constant-zero-range) round: nothing to transmit; every
            // chunk's aggregate is zero by construction.
            self.degenerate = true;
            for state in &mut self.chunk_state {
                *state = ChunkState::Resolved;
            }
            return Vec::new();
        }
        let clamped = hadamard::clamp(&self.transformed, m, max).expect("m <= max");
        let mut packets = Vec::with_capacity(self.num_chunks());
        for chunk in 0..self.num_chunks() {
            let range = self.chunk_range(chunk);
            let enc = codec::thc_encode(
                &clamped[range],
                m,
                max,
                &self.ctx.table,
                self.sq_seed(chunk),
                self.round,
                self.id,
            )
            .expect("clamped input within range");
            packets.push(GradientPacket {
                round_num: self.round,
                agtr_idx: chunk as u32,
                num_worker: self.ctx.num_workers,
                worker_id: self.id,
                count: enc.count as u32,
                bits_per_index: enc.bits_per_index,
                payload: enc.packed.clone(),
            });
            self.encoded[chunk] = Some(enc);
        }
        packets
    }

    fn on_result(&mut self, pkt: &ResultPacket) {
        let chunk = pkt.agtr_idx as usize;
        if chunk >= self.num_chunks() || self.chunk_state[chunk] == ChunkState::Resolved {
            return;
        }
        let values = codec::unpack_bits(&pkt.payload, pkt.value_width, pkt.count as usize)
            .expect("result payload length checked by parser");
        let payload = AggregatedPayload {
            y_sum: values.into_iter().map(u64::from).collect(),
            num_workers: pkt.num_aggregated,
            value_width: pkt.value_width,
            scale: self.scale,
            granularity: self.ctx.table.key.granularity,
        };
        let decoded = codec::decode_aggregate(&payload).expect("num_aggregated >= 1");
        let range = self.chunk_range(chunk);
        self.estimate[range].copy_from_slice(&decoded);
        self.chunk_state[chunk] = ChunkState::Resolved;
    }

    fn on_timeout(&mut self, agtr_idx: u32) {
        let chunk = agtr_idx as usize;
        if chunk >= self.num_chunks() || self.chunk_state[chunk] == ChunkState::Resolved {
            return;
        }
        // Proceed as if the aggregation result were all zeros: this chunk of
        // the transformed estimate contributes nothing this round.
        let range = self.chunk_range(chunk);
        self.estimate[range].fill(0.0);
        self.chunk_state[chunk] = ChunkState::Resolved;
        self.zero_filled += 1;
    }

    fn finish_round(&mut self, _round: u32) -> WorkerRoundOutcome {
        for state in &mut self.chunk_state {
            // a chunk can only still be pending if its packet was never sent
            if *state == ChunkState::Pending {
                *state = ChunkState::Resolved;
            }
        }
        let seed = self.transform_seed();
        let update_padded = hadamard::rht_inverse(&self.estimate, seed).expect("pow2");
        let update: Vec<f64> = update_padded[..self.model.len()].to_vec();
        for (w, u) in self.model.iter_mut().zip(&update) {
            *w -= self.ctx.eta * u;
        }

        // Error feedback against this worker's own quantization.
        if self.degenerate {
            self.error_feedback = self.x.clone();
        } else {
            let mut own = vec![0.0; self.padded_dim];
            for chunk in 0..self.num_chunks() {
                let range = self.chunk_range(chunk);
                let enc = self.encoded[chunk].as_ref().expect("encoded this round");
                let values = codec::decode_self(enc, &self.ctx.table).expect("own encoding");
                own[range].copy_from_slice(&values);
            }
            let own_update = hadamard::rht_inverse(&own, seed).expect("pow2");
            self.error_feedback = self.x.iter().zip(&own_update).map(|(x, o)| x - o).collect();
        }

        let outcome = WorkerRoundOutcome {
            update_fingerprint: fingerprint(&update),
            zero_filled_chunks: self.zero_filled,
        };
        self.last_update = update;
        outcome
    }

    fn model(&self) -> &[f64] {
        &self.model
    }

    fn set_model(&mut self, model: &[f64]) {
        self.model = model.to_vec();
    }
}
