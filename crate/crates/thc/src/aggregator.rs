//! The software parameter server: per-slot aggregation state driven one
//! packet at a time.
//!
//! The packet path is integer-only - table lookups and additions into wide
//! accumulators - so the logic maps onto hardware that cannot do floating
//! point. Scales never enter this module; workers divide by `n` and rescale
//! after decoding.
//!
//! Per-slot discipline for an arriving packet:
//!
//! * `round < expected`: stale data from a straggling worker - discard and
//!   notify the sender;
//! * `round == expected`: accumulate; a worker already counted this round is
//!   a duplicate error; a late packet after the slot multicast is dropped and
//!   recorded;
//! * `round > expected`: the cluster moved on - reset the slot to the new
//!   round with this packet as its first contribution.
//!
//! A slot multicasts its accumulated sums once `ceil(partial_threshold * n)`
//! distinct workers have contributed (1.0 = full aggregation).

use crate::codec::{self, CodecError};
use crate::protocol::{GradientPacket, PrelimPacket, PrelimValue, ResultPacket, StragglerNotice};
use crate::tables::LookupTable;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AggError {
    #[error("duplicate packet from worker {worker_id} for round {round}")]
    Duplicate { worker_id: u16, round: u32 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Server configuration; the overflow bound `g*n <= 2^value_width - 1` is
/// checked here, at construction, never in the packet path.
#[derive(Debug, Clone)]
pub struct PsConfig {
    pub table: LookupTable,
    pub num_worker: u16,
    pub value_width: u8,
    pub partial_threshold: f64,
    pub num_slots: u32,
}

impl PsConfig {
    pub fn new(
        table: LookupTable,
        num_worker: u16,
        value_width: u8,
        partial_threshold: f64,
        num_slots: u32,
    ) -> Result<Self, AggError> {
        if num_worker == 0 || num_worker > 128 {
            return Err(AggError::Config(format!(
                "num_worker {num_worker} outside 1..=128"
            )));
        }
        if num_slots == 0 {
            return Err(AggError::Config("need at least one slot".into()));
        }
        if !(partial_threshold > 0.0 && partial_threshold <= 1.0) {
            return Err(AggError::Config(format!(
                "partial threshold {partial_threshold} outside (0, 1]"
            )));
        }
        codec::check_overflow(table.key.granularity, num_worker, value_width)
            .map_err(|e| AggError::Config(e.to_string()))?;
        Ok(Self {
            table,
            num_worker,
            value_width,
            partial_threshold,
            num_slots,
        })
    }

    /// `ceil(partial_threshold * num_worker)`, with a 1e-9 slack so binary
    /// representations of thresholds like 0.9 do not round 9 up to 10.
    pub fn required_count(&self) -> u16 {
        let target = self.partial_threshold * self.num_worker as f64;
        let k = (target - 1e-9).ceil() as u16;
        k.clamp(1, self.num_worker)
    }
}

/// Per-chunk aggregation state.
#[derive(Debug, Clone)]
pub struct AggregationSlot {
    pub expected_roundnum: u32,
    pub recv_count: u16,
    /// Bit `w` set when worker `w` contributed to the current round.
    pub received_mask: u128,
    /// Integer accumulators, one per coordinate of the chunk.
    pub accumulators: Vec<u64>,
    /// Set once the current round's result was multicast.
    pub completed: bool,
}

impl AggregationSlot {
    fn new() -> Self {
        Self {
            expected_roundnum: 0,
            recv_count: 0,
            received_mask: 0,
            accumulators: Vec::new(),
            completed: false,
        }
    }

    /// Clear accumulators and membership and move to `new_round`.
    pub fn reset_round(&mut self, new_round: u32) {
        self.expected_roundnum = new_round;
        self.recv_count = 0;
        self.received_mask = 0;
        self.accumulators.clear();
        self.completed = false;
    }
}

/// Counters for packets the switch path discards without acting on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AggMetrics {
    pub accumulated: u64,
    pub stale_packets: u64,
    pub duplicates: u64,
    pub late_dropped: u64,
    pub completions: u64,
    pub partial_completions: u64,
}

/// Outcome of processing one gradient packet.
#[derive(Debug, Clone, PartialEq)]
pub enum PsAction {
    /// Stale round: sender is told it is straggling.
    NotifyStraggler(StragglerNotice),
    /// Counted into the slot; waiting for more workers.
    Accumulated,
    /// Threshold reached: the aggregation result to broadcast.
    Multicast(ResultPacket),
    /// Same round but the result already went out; dropped and recorded.
    LateDropped,
}

#[derive(Debug)]
pub struct Aggregator {
    config: PsConfig,
    required: u16,
    slots: Vec<AggregationSlot>,
    pub metrics: AggMetrics,
}

impl Aggregator {
    pub fn new(config: PsConfig) -> Self {
        let required = config.required_count();
        let slots = (0..config.num_slots)
            .map(|_| AggregationSlot::new())
            .collect();
        Self {
            config,
            required,
            slots,
            metrics: AggMetrics::default(),
        }
    }

    pub fn config(&self) -> &PsConfig {
        &self.config
    }

    pub fn slot(&self, agtr_idx: u32) -> Option<&AggregationSlot> {
        self.slots.get(agtr_idx as usize)
    }

    fn check_packet(&self, pkt: &GradientPacket) -> Result<(), AggError> {
        pkt.validate()
            .map_err(|e| AggError::Protocol(e.to_string()))?;
        if pkt.num_worker != self.config.num_worker {
            return Err(AggError::Protocol(format!(
                "packet claims {} workers, configured for {}",
                pkt.num_worker, self.config.num_worker
            )));
        }
        if pkt.bits_per_index != self.config.table.key.bits {
            return Err(AggError::Protocol(format!(
                "packet uses {}-bit indices, table expects {}",
                pkt.bits_per_index, self.config.table.key.bits
            )));
        }
        if pkt.agtr_idx >= self.config.num_slots {
            return Err(AggError::Protocol(format!(
                "agtr_idx {} out of range ({} slots)",
                pkt.agtr_idx, self.config.num_slots
            )));
        }
        Ok(())
    }

    /// Pseudo-state machine step for one gradient packet.
    pub fn process_packet(&mut self, pkt: &GradientPacket) -> Result<PsAction, AggError> {
        self.check_packet(pkt)?;
        let slot_idx = pkt.agtr_idx as usize;

        if pkt.round_num < self.slots[slot_idx].expected_roundnum {
            self.metrics.stale_packets += 1;
            return Ok(PsAction::NotifyStraggler(StragglerNotice {
                round_num: pkt.round_num,
                agtr_idx: pkt.agtr_idx,
                num_worker: pkt.num_worker,
                worker_id: pkt.worker_id,
            }));
        }

        if pkt.round_num > self.slots[slot_idx].expected_roundnum {
            self.slots[slot_idx].reset_round(pkt.round_num);
        } else {
            let slot = &self.slots[slot_idx];
            if slot.received_mask & (1u128 << pkt.worker_id) != 0 {
                self.metrics.duplicates += 1;
                return Err(AggError::Duplicate {
                    worker_id: pkt.worker_id,
                    round: pkt.round_num,
                });
            }
            if slot.completed {
                self.metrics.late_dropped += 1;
                return Ok(PsAction::LateDropped);
            }
        }

        // Table lookup + integer accumulation; the only arithmetic here.
        let indices = codec::unpack_bits(&pkt.payload, pkt.bits_per_index, pkt.count as usize)?;
        let table = &self.config.table.values;
        for &z in &indices {
            if z as usize >= table.len() {
                return Err(AggError::Protocol(format!(
                    "table index {z} out of range for {} entries",
                    table.len()
                )));
            }
        }
        let slot = &mut self.slots[slot_idx];
        if slot.accumulators.is_empty() {
            slot.accumulators = vec![0u64; pkt.count as usize];
        } else if slot.accumulators.len() != pkt.count as usize {
            return Err(AggError::Protocol(format!(
                "chunk size {} does not match slot size {}",
                pkt.count,
                slot.accumulators.len()
            )));
        }
        for (acc, z) in slot.accumulators.iter_mut().zip(&indices) {
            *acc += table[*z as usize] as u64;
        }
        slot.received_mask |= 1u128 << pkt.worker_id;
        slot.recv_count += 1;
        self.metrics.accumulated += 1;

        if slot.recv_count == self.required {
            slot.completed = true;
            self.metrics.completions += 1;
            if self.required < self.config.num_worker {
                self.metrics.partial_completions += 1;
            }
            let values: Vec<u32> = slot.accumulators.iter().map(|&v| v as u32).collect();
            let payload = codec::pack_bits(&values, self.config.value_width)?;
            return Ok(PsAction::Multicast(ResultPacket {
                round_num: pkt.round_num,
                agtr_idx: pkt.agtr_idx,
                num_worker: pkt.num_worker,
                worker_id: 0,
                count: pkt.count,
                value_width: self.config.value_width,
                num_aggregated: slot.recv_count,
                payload,
            }));
        }
        Ok(PsAction::Accumulated)
    }

    /// Preliminary-stage reduction: global extremes (min/max mode) or the
    /// maximal norm. Exactly one packet per worker, one mode per round.
    pub fn prelim_aggregate(&self, prelims: &[PrelimPacket]) -> Result<PrelimPacket, AggError> {
        if prelims.len() != self.config.num_worker as usize {
            return Err(AggError::Protocol(format!(
                "expected {} preliminary packets, got {}",
                self.config.num_worker,
                prelims.len()
            )));
        }
        let round = prelims[0].round_num;
        let mut seen = 0u128;
        for p in prelims {
            if !p.to_server {
                return Err(AggError::Protocol(
                    "preliminary packet not addressed to the server".into(),
                ));
            }
            if p.round_num != round {
                return Err(AggError::Protocol(
                    "mixed rounds in preliminary stage".into(),
                ));
            }
            if p.worker_id >= self.config.num_worker {
                return Err(AggError::Protocol(format!(
                    "worker id {} out of range",
                    p.worker_id
                )));
            }
            if seen & (1u128 << p.worker_id) != 0 {
                return Err(AggError::Duplicate {
                    worker_id: p.worker_id,
                    round,
                });
            }
            seen |= 1u128 << p.worker_id;
        }
        let value = match prelims[0].value {
            PrelimValue::MinMax { .. } => {
                let mut gm = f64::INFINITY;
                let mut gmax = f64::NEG_INFINITY;
                for p in prelims {
                    match p.value {
                        PrelimValue::MinMax { m, max } => {
                            gm = gm.min(m);
                            gmax = gmax.max(max);
                        }
                        PrelimValue::Norm(_) => {
                            return Err(AggError::Protocol(
                                "mixed min/max and norm preliminaries in one round".into(),
                            ))
                        }
                    }
                }
                PrelimValue::MinMax { m: gm, max: gmax }
            }
            PrelimValue::Norm(_) => {
                let mut ell = 0.0f64;
                for p in prelims {
                    match p.value {
                        PrelimValue::Norm(l) => ell = ell.max(l),
                        PrelimValue::MinMax { .. } => {
                            return Err(AggError::Protocol(
                                "mixed min/max and norm preliminaries in one round".into(),
                            ))
                        }
                    }
                }
                PrelimValue::Norm(ell)
            }
        };
        Ok(PrelimPacket {
            to_server: false,
            round_num: round,
            num_worker: self.config.num_worker,
            worker_id: 0,
            value,
        })
    }
}
