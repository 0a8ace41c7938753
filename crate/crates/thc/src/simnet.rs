//! Deterministic discrete-event network between `n` workers and the
//! aggregator.
//!
//! Time is an integer tick; events are processed in nondecreasing time with
//! FIFO tie-break by insertion order, on a single thread - identical
//! `(seed, config, workload)` produce identical traces. Each packet loses
//! independently per direction with probability `loss_rate`; the draw is a
//! pure function of `(seed, packet identity)`, so a rerun reproduces the same
//! losses. Stragglers have their uplink packets for the round suppressed.
//! A worker that never receives a slot's result by `timeout` zero-fills that
//! chunk of its aggregated estimate and moves on.
//!
//! The preliminary (scale) exchange is lossless: at two floats per worker
//! per round it is negligible traffic next to the gradient chunks.

use crate::aggregator::{AggError, Aggregator, PsAction};
use crate::protocol::{
    GradientPacket, Packet, PrelimPacket, ResultPacket, StragglerNotice, MSG_GRADIENT, MSG_RESULT,
    MSG_STRAGGLER,
};
use crate::seed::{self, TAG_NET, TAG_STRAGGLER};
use rand::Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation config error: {0}")]
    Config(String),
    #[error(transparent)]
    Aggregator(#[from] AggError),
}

/// Who sits still each round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StragglerPolicy {
    None,
    /// These workers straggle every round.
    Fixed(Vec<u16>),
    /// `k` distinct workers drawn per round from the config seed.
    RandomPerRound(usize),
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    /// Independent per-packet, per-direction loss probability in `[0, 1)`.
    pub loss_rate: f64,
    pub straggler_policy: StragglerPolicy,
    /// Ticks a worker waits for a slot result before zero-filling.
    pub timeout: u64,
    /// Per-hop delivery latency in ticks.
    pub latency: u64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            loss_rate: 0.0,
            straggler_policy: StragglerPolicy::None,
            timeout: 16,
            latency: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Uplink,
    Downlink,
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(SimError::Config(format!(
                "loss rate {} outside [0, 1)",
                self.loss_rate
            )));
        }
        if self.timeout == 0 || self.latency == 0 {
            return Err(SimError::Config("timeout and latency must be >= 1".into()));
        }
        Ok(())
    }

    /// Deterministic Bernoulli loss draw for one packet identity.
    pub fn packet_lost(
        &self,
        round: u32,
        direction: Direction,
        msg_type: u8,
        agtr_idx: u32,
        src: u16,
        dst: u16,
    ) -> bool {
        if self.loss_rate == 0.0 {
            return false;
        }
        let dir = match direction {
            Direction::Uplink => 0u64,
            Direction::Downlink => 1u64,
        };
        let h = seed::derive_seed(
            self.seed,
            &[
                TAG_NET,
                round as u64,
                dir,
                msg_type as u64,
                agtr_idx as u64,
                src as u64,
                dst as u64,
            ],
        );
        let u = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u < self.loss_rate
    }

    /// The round's straggler set under the configured policy.
    pub fn stragglers(&self, round: u32, num_worker: u16) -> Vec<u16> {
        match &self.straggler_policy {
            StragglerPolicy::None => Vec::new(),
            StragglerPolicy::Fixed(set) => {
                let mut s: Vec<u16> = set.iter().copied().filter(|&w| w < num_worker).collect();
                s.sort_unstable();
                s.dedup();
                s
            }
            StragglerPolicy::RandomPerRound(k) => {
                let mut rng =
                    seed::stream(seed::derive_seed(self.seed, &[TAG_STRAGGLER, round as u64]));
                let mut pool: Vec<u16> = (0..num_worker).collect();
                let mut out = Vec::new();
                for _ in 0..(*k).min(num_worker as usize) {
                    let i = (rng.random::<u64>() % pool.len() as u64) as usize;
                    out.push(pool.swap_remove(i));
                }
                out.sort_unstable();
                out
            }
        }
    }
}

/// Event destinations: the aggregator or one worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Server,
    Worker(u16),
}

#[derive(Debug, Clone)]
pub enum EventKind {
    RoundStart { round: u32 },
    Deliver { dest: Dest, packet: Packet },
    Timeout { worker: u16, agtr_idx: u32 },
}

#[derive(Debug, Clone)]
pub struct Event {
    pub time: u64,
    /// Insertion order; ties in time are FIFO.
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want earliest first
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }
}

/// A worker participating in one aggregation round, driven by the event loop.
pub trait RoundWorker {
    fn worker_id(&self) -> u16;
    /// Produce this round's preliminary (scale) packet.
    fn prelim(&mut self, round: u32) -> PrelimPacket;
    /// Receive the global scale; pre-process, encode, and packetize.
    fn on_prelim_reply(&mut self, reply: &PrelimPacket) -> Vec<GradientPacket>;
    /// A slot's aggregation result arrived in time.
    fn on_result(&mut self, pkt: &ResultPacket);
    /// The PS flagged one of this worker's packets as stale.
    fn on_straggler_notice(&mut self, _pkt: &StragglerNotice) {}
    /// No result for this slot within the timeout: substitute zeros.
    fn on_timeout(&mut self, agtr_idx: u32);
    /// All slots resolved: apply the update.
    fn finish_round(&mut self, round: u32) -> WorkerRoundOutcome;
    /// Model state, for periodic synchronization and objective evaluation.
    fn model(&self) -> &[f64];
    fn set_model(&mut self, model: &[f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerRoundOutcome {
    /// FNV-1a hash of the applied update - model-divergence fingerprint.
    pub update_fingerprint: u64,
    pub zero_filled_chunks: u32,
}

/// Per-round statistics and per-worker fingerprints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    pub stragglers: Vec<u16>,
    pub sent_up: u64,
    pub delivered_up: u64,
    pub lost_up: u64,
    pub suppressed_up: u64,
    pub sent_down: u64,
    pub delivered_down: u64,
    pub lost_down: u64,
    pub timeouts: u64,
    pub zero_filled_chunks: u64,
    pub late_results_ignored: u64,
    pub straggler_notices: u64,
    pub stale_packets: u64,
    pub late_dropped: u64,
    pub completions: u64,
    pub partial_completions: u64,
    pub fingerprints: Vec<u64>,
}

/// FNV-1a over the raw bytes of an f64 slice.
pub fn fingerprint(values: &[f64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Drive one full aggregation round over the simulated network.
pub fn run_round<W: RoundWorker>(
    workers: &mut [W],
    agg: &mut Aggregator,
    cfg: &NetConfig,
    round: u32,
) -> Result<RoundReport, SimError> {
    cfg.validate()?;
    let n = workers.len() as u16;
    if n == 0 || n != agg.config().num_worker {
        return Err(SimError::Config(format!(
            "{} workers driven but aggregator configured for {}",
            n,
            agg.config().num_worker
        )));
    }
    for (i, w) in workers.iter().enumerate() {
        if w.worker_id() != i as u16 {
            return Err(SimError::Config(format!(
                "worker at position {i} reports id {}",
                w.worker_id()
            )));
        }
    }

    let metrics_before = agg.metrics;
    let mut report = RoundReport {
        round,
        stragglers: cfg.stragglers(round, n),
        ..RoundReport::default()
    };

    let mut q = EventQueue::new();
    q.push(0, EventKind::RoundStart { round });

    // (worker, agtr_idx) -> resolved by result or by timeout
    let mut resolved: std::collections::HashSet<(u16, u32)> = std::collections::HashSet::new();

    while let Some(ev) = q.pop() {
        match ev.kind {
            EventKind::RoundStart { round } => {
                // Lossless preliminary exchange, then every worker encodes
                // and transmits its chunks at once.
                let prelims: Vec<PrelimPacket> =
                    workers.iter_mut().map(|w| w.prelim(round)).collect();
                let reply = agg.prelim_aggregate(&prelims)?;
                for w in workers.iter_mut() {
                    let wid = w.worker_id();
                    let straggling = report.stragglers.contains(&wid);
                    for pkt in w.on_prelim_reply(&reply) {
                        if pkt.worker_id != wid || pkt.round_num != round {
                            return Err(SimError::Config(format!(
                                "worker {wid} produced a packet labeled worker {} round {}",
                                pkt.worker_id, pkt.round_num
                            )));
                        }
                        report.sent_up += 1;
                        q.push(
                            ev.time + cfg.timeout,
                            EventKind::Timeout {
                                worker: wid,
                                agtr_idx: pkt.agtr_idx,
                            },
                        );
                        if straggling {
                            report.suppressed_up += 1;
                        } else if cfg.packet_lost(
                            round,
                            Direction::Uplink,
                            MSG_GRADIENT,
                            pkt.agtr_idx,
                            wid,
                            u16::MAX,
                        ) {
                            report.lost_up += 1;
                        } else {
                            q.push(
                                ev.time + cfg.latency,
                                EventKind::Deliver {
                                    dest: Dest::Server,
                                    packet: Packet::Gradient(pkt),
                                },
                            );
                        }
                    }
                }
            }
            EventKind::Deliver {
                dest: Dest::Server,
                packet: Packet::Gradient(pkt),
            } => {
                report.delivered_up += 1;
                match agg.process_packet(&pkt)? {
                    PsAction::Accumulated | PsAction::LateDropped => {}
                    PsAction::NotifyStraggler(notice) => {
                        report.sent_down += 1;
                        let dst = notice.worker_id;
                        if cfg.packet_lost(
                            round,
                            Direction::Downlink,
                            MSG_STRAGGLER,
                            notice.agtr_idx,
                            u16::MAX,
                            dst,
                        ) {
                            report.lost_down += 1;
                        } else {
                            q.push(
                                ev.time + cfg.latency,
                                EventKind::Deliver {
                                    dest: Dest::Worker(dst),
                                    packet: Packet::Straggler(notice),
                                },
                            );
                        }
                    }
                    PsAction::Multicast(result) => {
                        for dst in 0..n {
                            report.sent_down += 1;
                            if cfg.packet_lost(
                                round,
                                Direction::Downlink,
                                MSG_RESULT,
                                result.agtr_idx,
                                u16::MAX,
                                dst,
                            ) {
                                report.lost_down += 1;
                            } else {
                                q.push(
                                    ev.time + cfg.latency,
                                    EventKind::Deliver {
                                        dest: Dest::Worker(dst),
                                        packet: Packet::Result(result.clone()),
                                    },
                                );
                            }
                        }
                    }
                }
            }
            EventKind::Deliver {
                dest: Dest::Worker(wid),
                packet,
            } => {
                report.delivered_down += 1;
                match packet {
                    Packet::Result(result) => {
                        if resolved.insert((wid, result.agtr_idx)) {
                            workers[wid as usize].on_result(&result);
                        } else {
                            // arrived after this worker's timeout zero-filled
                            report.late_results_ignored += 1;
                        }
                    }
                    Packet::Straggler(notice) => {
                        report.straggler_notices += 1;
                        workers[wid as usize].on_straggler_notice(&notice);
                    }
                    other => {
                        return Err(SimError::Config(format!(
                            "unexpected worker-bound packet {other:?}"
                        )))
                    }
                }
            }
            EventKind::Deliver {
                dest: Dest::Server,
                packet,
            } => {
                return Err(SimError::Config(format!(
                    "unexpected server-bound packet {packet:?}"
                )))
            }
            EventKind::Timeout { worker, agtr_idx } => {
                if resolved.insert((worker, agtr_idx)) {
                    report.timeouts += 1;
                    workers[worker as usize].on_timeout(agtr_idx);
                }
            }
        }
    }

    for w in workers.iter_mut() {
        let outcome = w.finish_round(round);
        report.zero_filled_chunks += outcome.zero_filled_chunks as u64;
        report.fingerprints.push(outcome.update_fingerprint);
    }

    report.stale_packets = agg.metrics.stale_packets - metrics_before.stale_packets;
    report.late_dropped = agg.metrics.late_dropped - metrics_before.late_dropped;
    report.completions = agg.metrics.completions - metrics_before.completions;
    report.partial_completions =
        agg.metrics.partial_completions - metrics_before.partial_completions;
    Ok(report)
}

/// Every `period` rounds, reset all models to worker 0's state. Returns
/// whether a sync happened after this `round`.
pub fn periodic_sync<W: RoundWorker>(workers: &mut [W], round: u32, period: u32) -> bool {
    if period == 0 || (round + 1) % period != 0 {
        return false;
    }
    let (src, rest) = workers.split_first_mut().expect("at least one worker");
    let model = src.model().to_vec();
    for w in rest {
        w.set_model(&model);
    }
    true
}
