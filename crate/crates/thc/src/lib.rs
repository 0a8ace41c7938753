//! Homomorphic compression for distributed gradient aggregation.
//!
//! Workers stochastically quantize their gradients against a shared set of
//! quantization values and transmit small table indices; the parameter server
//! aggregates by table lookup and integer addition only, and each worker runs
//! a single decompression at the end. Because every party uses the same scale,
//! the average of the decoded gradients equals the decode of the summed
//! indices' table values - aggregation happens in compressed form.
//!
//! Module map:
//!
//! * [`hadamard`]: orthonormal fast Walsh-Hadamard / randomized Hadamard
//!   transforms, padding, clamping, and range derivation (pre/post-processing).
//! * [`tables`]: offline construction of optimal non-uniform lookup tables
//!   for a truncated-normal source, plus the on-disk table cache.
//! * [`codec`]: stochastic quantization, uniform and non-uniform encoding and
//!   decoding, and fixed-width bit packing.
//! * [`protocol`]: bit-exact wire formats for gradient, result, preliminary,
//!   and straggler packets.
//! * [`aggregator`]: the parameter-server state machine: slots, integer
//!   accumulation, completion detection, partial aggregation, stragglers.
//! * [`simnet`]: deterministic discrete-event network with Bernoulli loss,
//!   straggler injection, timeouts, and zero-fill recovery.
//! * [`harness`]: the full training-round driver, NMSE and resiliency
//!   experiments, and gradient sources.

pub mod aggregator;
pub mod codec;
pub mod hadamard;
pub mod harness;
pub mod protocol;
pub mod seed;
pub mod simnet;
pub mod tables;

pub use aggregator::{Aggregator, PsAction, PsConfig};
pub use codec::{AggregatedPayload, EncodedGradient};
pub use hadamard::TransformSeed;
pub use simnet::{NetConfig, RoundReport, StragglerPolicy};
pub use tables::{LookupTable, QuantizationValues, TableKey};
