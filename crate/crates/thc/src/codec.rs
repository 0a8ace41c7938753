//! Stochastic quantization and the homomorphic encode/decode pipeline.
//!
//! Encoding (the non-uniform path, with `m < M` the shared clamp range):
//!
//! ```text
//! Q    = m + T[z]*(M-m)/g            quantization values
//! X    = SQ(x, Q)                    unbiased two-point rounding
//! Y    = (X - m)*g/(M-m)             integer grid value  (in <g+1>)
//! Z    = T^{-1}[Y]                   table index         (in <2^b>)
//! ```
//!
//! `Z` is bit-packed at `b` bits per coordinate. The server only ever sums
//! `T[Z_i]` in integers; each worker decodes the sum as `m + (Y/n)*(M-m)/g`.
//! Because all workers share `(m, M, T)`, decoding the summed table values
//! equals averaging the per-worker decodes - exactly, in integer arithmetic.
//!
//! Uniform mode is the identity table with `g = 2^b - 1`.

use crate::seed;
use crate::tables::{calc_quantization_values, LookupTable, QuantizationValues, TableError};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("coordinate {index} = {value} outside clamp range [{m}, {max}] (clamp first)")]
    OutOfRange {
        index: usize,
        value: f64,
        m: f64,
        max: f64,
    },
    #[error("degenerate range: m={m} >= M={max}")]
    DegenerateRange { m: f64, max: f64 },
    #[error("bit width {0} outside 1..=16")]
    BadWidth(u8),
    #[error("value {value} does not fit in {width} bits")]
    ValueTooWide { value: u64, width: u8 },
    #[error("packed buffer too short: need {needed} bytes, got {got}")]
    ShortBuffer { needed: usize, got: usize },
    #[error("aggregation over zero workers")]
    EmptyAggregation,
    #[error("encoded gradients disagree on {0}")]
    MixedMetadata(&'static str),
    #[error("g*n = {granularity}*{workers} exceeds 2^{width} - 1: accumulator would overflow")]
    OverflowConfig {
        granularity: u32,
        workers: u16,
        width: u8,
    },
    #[error("encoded at {encoded} bits but table has a {table}-bit budget")]
    BitsMismatch { encoded: u8, table: u8 },
    #[error("coordinate {index}: quantized value maps to {y:.9}, not an integer grid value")]
    NotOnGrid { index: usize, y: f64 },
    #[error("coordinate {index}: grid value {y} is not in the table image")]
    NotInImage { index: usize, y: u32 },
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Shared scale metadata carried with every encoded gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub m: f64,
    pub max: f64,
}

/// Bit-packed table indices plus the round metadata needed to aggregate and
/// decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGradient {
    /// `ceil(count * bits_per_index / 8)` bytes of packed indices.
    pub packed: Vec<u8>,
    pub count: usize,
    pub bits_per_index: u8,
    pub scale: Scale,
    pub round: u32,
    pub worker_id: u16,
}

impl EncodedGradient {
    pub fn indices(&self) -> Result<Vec<u32>, CodecError> {
        unpack_bits(&self.packed, self.bits_per_index, self.count)
    }
}

/// Stochastic-quantization output: the chosen values and their grid images.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    /// Chosen quantization values (`X`), each one of the table's values.
    pub x_q: Vec<f64>,
    /// Integer grid values (`Y = (X - m)*g/(M-m)`), each in `<g+1>`.
    pub y: Vec<u32>,
}

/// Integer aggregate of several encoded gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPayload {
    /// `y_sum[j] = sum_i T[Z_i[j]]`, each `<= g * num_workers`.
    pub y_sum: Vec<u64>,
    pub num_workers: u16,
    /// Bits per accumulated value on the wire; `g*n <= 2^width - 1`.
    pub value_width: u8,
    pub scale: Scale,
    pub granularity: u32,
}

/// Unbiased stochastic quantization of each coordinate to one of its two
/// bracketing values in `q`: the upper value is chosen with probability
/// `(x - c0)/(c1 - c0)`, so the expectation is exactly `x`.
///
/// Deterministic given `rng_seed`; coordinate `j` consumes the `j`-th draw of
/// the counter-based stream, so the coin sequence is position-addressable.
pub fn sq(x: &[f64], q: &QuantizationValues, rng_seed: u64) -> Result<Vec<f64>, CodecError> {
    Ok(sq_indices(x, q, rng_seed)?
        .into_iter()
        .map(|z| q.values[z as usize])
        .collect())
}

fn sq_indices(x: &[f64], q: &QuantizationValues, rng_seed: u64) -> Result<Vec<u16>, CodecError> {
    let vals = &q.values;
    let mut rng = seed::stream(rng_seed);
    let mut out = Vec::with_capacity(x.len());
    for (index, &v) in x.iter().enumerate() {
        let coin: f64 = rng.random();
        if v < q.m || v > q.max {
            return Err(CodecError::OutOfRange {
                index,
                value: v,
                m: q.m,
                max: q.max,
            });
        }
        let hi = vals.partition_point(|c| *c <= v).min(vals.len() - 1);
        let lo = hi - 1;
        let frac = (v - vals[lo]) / (vals[hi] - vals[lo]);
        out.push(if coin < frac { hi as u16 } else { lo as u16 });
    }
    Ok(out)
}

/// Map quantization values back to their integer grid images by
/// nearest-integer rounding of `(x_q - m)*g/(M-m)`. The inputs are built from
/// grid points, so landing within 1e-6 of an integer is an invariant.
fn grid_values(x_q: &[f64], m: f64, max: f64, g: u32) -> Result<Vec<u32>, CodecError> {
    let scale = g as f64 / (max - m);
    x_q.iter()
        .enumerate()
        .map(|(index, &v)| {
            let y = (v - m) * scale;
            let rounded = y.round();
            if (y - rounded).abs() > 1e-6 || rounded < 0.0 || rounded > g as f64 {
                return Err(CodecError::NotOnGrid { index, y });
            }
            Ok(rounded as u32)
        })
        .collect()
}

/// Stochastically quantize and produce both the values and grid images.
pub fn quantize(
    x: &[f64],
    q: &QuantizationValues,
    g: u32,
    rng_seed: u64,
) -> Result<QuantizedVector, CodecError> {
    let x_q = sq(x, q, rng_seed)?;
    let y = grid_values(&x_q, q.m, q.max, g)?;
    Ok(QuantizedVector { x_q, y })
}

/// Uniform stochastic quantization: `2^b` evenly spaced values on `[m, M]`,
/// emitting the value's own index.
pub fn usq_encode(
    x: &[f64],
    m: f64,
    max: f64,
    bits: u8,
    rng_seed: u64,
    round: u32,
    worker_id: u16,
) -> Result<EncodedGradient, CodecError> {
    if !(m < max) {
        return Err(CodecError::DegenerateRange { m, max });
    }
    let levels = (1u32 << bits) - 1;
    let values: Vec<f64> = (0..=levels)
        .map(|k| m + k as f64 * (max - m) / levels as f64)
        .collect();
    let q = QuantizationValues { values, m, max };
    let z = sq_indices(x, &q, rng_seed)?;
    let packed = pack_bits(&z.iter().map(|&v| v as u32).collect::<Vec<_>>(), bits)?;
    Ok(EncodedGradient {
        packed,
        count: x.len(),
        bits_per_index: bits,
        scale: Scale { m, max },
        round,
        worker_id,
    })
}

/// Non-uniform encode: quantize against the table's values, map to grid
/// integers, then to table indices via the inverse lookup.
pub fn thc_encode(
    x_clamped: &[f64],
    m: f64,
    max: f64,
    table: &LookupTable,
    rng_seed: u64,
    round: u32,
    worker_id: u16,
) -> Result<EncodedGradient, CodecError> {
    if !(m < max) {
        return Err(CodecError::DegenerateRange { m, max });
    }
    let g = table.key.granularity;
    let q = calc_quantization_values(m, max, table)?;
    let quantized = quantize(x_clamped, &q, g, rng_seed)?;
    let inverse = table.inverse();
    let mut z = Vec::with_capacity(quantized.y.len());
    for (index, &y) in quantized.y.iter().enumerate() {
        // SQ only emits table values, so the inverse lookup is total here.
        match inverse[y as usize] {
            Some(idx) => z.push(idx as u32),
            None => {
                debug_assert!(false, "grid value {y} escaped the table image");
                return Err(CodecError::NotInImage { index, y });
            }
        }
    }
    let packed = pack_bits(&z, table.key.bits)?;
    Ok(EncodedGradient {
        packed,
        count: x_clamped.len(),
        bits_per_index: table.key.bits,
        scale: Scale { m, max },
        round,
        worker_id,
    })
}

/// Server-side aggregation: `y_sum[j] = sum_i T[Z_i[j]]` in pure integer
/// arithmetic. All inputs must agree on round, dimension, bit budget, and
/// scale, and `g * n` must fit in `value_width` bits (checked before summing).
pub fn table_lookup_sum(
    encoded: &[EncodedGradient],
    table: &LookupTable,
    value_width: u8,
) -> Result<AggregatedPayload, CodecError> {
    let first = encoded.first().ok_or(CodecError::EmptyAggregation)?;
    if first.bits_per_index != table.key.bits {
        return Err(CodecError::BitsMismatch {
            encoded: first.bits_per_index,
            table: table.key.bits,
        });
    }
    let g = table.key.granularity;
    let n = encoded.len() as u16;
    check_overflow(g, n, value_width)?;
    for e in encoded {
        if e.round != first.round {
            return Err(CodecError::MixedMetadata("round"));
        }
        if e.count != first.count {
            return Err(CodecError::MixedMetadata("dimension"));
        }
        if e.scale != first.scale {
            return Err(CodecError::MixedMetadata("scale"));
        }
        if e.bits_per_index != first.bits_per_index {
            return Err(CodecError::MixedMetadata("bit budget"));
        }
    }
    let mut y_sum = vec![0u64; first.count];
    for e in encoded {
        for (acc, z) in y_sum.iter_mut().zip(e.indices()?) {
            *acc += table.values[z as usize] as u64;
        }
    }
    Ok(AggregatedPayload {
        y_sum,
        num_workers: n,
        value_width,
        scale: first.scale,
        granularity: g,
    })
}

/// `g * n` must be representable in `width` bits.
pub fn check_overflow(granularity: u32, workers: u16, width: u8) -> Result<(), CodecError> {
    if width == 0 || width > 16 {
        return Err(CodecError::BadWidth(width));
    }
    let max = (1u64 << width) - 1;
    if granularity as u64 * workers as u64 > max {
        return Err(CodecError::OverflowConfig {
            granularity,
            workers,
            width,
        });
    }
    Ok(())
}

/// Worker-side decode of the aggregate: `m + (Y/n) * (M-m)/g`, the division
/// by `n` happening here in real arithmetic, never at the server.
pub fn decode_aggregate(payload: &AggregatedPayload) -> Result<Vec<f64>, CodecError> {
    if payload.num_workers == 0 {
        return Err(CodecError::EmptyAggregation);
    }
    let n = payload.num_workers as f64;
    let Scale { m, max } = payload.scale;
    let g = payload.granularity as f64;
    Ok(payload
        .y_sum
        .iter()
        .map(|&y| m + (y as f64 / n) * (max - m) / g)
        .collect())
}

/// Reconstruct the encoder's own quantized values: `X = m + T[Z]*(M-m)/g`.
pub fn decode_self(encoded: &EncodedGradient, table: &LookupTable) -> Result<Vec<f64>, CodecError> {
    if encoded.bits_per_index != table.key.bits {
        return Err(CodecError::BitsMismatch {
            encoded: encoded.bits_per_index,
            table: table.key.bits,
        });
    }
    let Scale { m, max } = encoded.scale;
    let g = table.key.granularity as f64;
    Ok(encoded
        .indices()?
        .iter()
        .map(|&z| m + table.values[z as usize] as f64 * (max - m) / g)
        .collect())
}

/// Pack fixed-width integers LSB-first: value `k` occupies bit positions
/// `[k*width, (k+1)*width)` of the stream, least significant bit first.
pub fn pack_bits(values: &[u32], width: u8) -> Result<Vec<u8>, CodecError> {
    if width == 0 || width > 16 {
        return Err(CodecError::BadWidth(width));
    }
    let limit = 1u64 << width;
    let mut out = vec![0u8; (values.len() * width as usize).div_ceil(8)];
    for (k, &v) in values.iter().enumerate() {
        if v as u64 >= limit {
            return Err(CodecError::ValueTooWide {
                value: v as u64,
                width,
            });
        }
        let mut bit = k * width as usize;
        let mut rest = v;
        let mut left = width;
        while left > 0 {
            let byte = bit / 8;
            let offset = (bit % 8) as u32;
            let take = (8 - offset).min(left as u32);
            out[byte] |= ((rest & ((1u32 << take) - 1)) as u8) << offset;
            rest >>= take;
            bit += take as usize;
            left -= take as u8;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_bits`].
pub fn unpack_bits(bytes: &[u8], width: u8, count: usize) -> Result<Vec<u32>, CodecError> {
    if width == 0 || width > 16 {
        return Err(CodecError::BadWidth(width));
    }
    let needed = (count * width as usize).div_ceil(8);
    if bytes.len() < needed {
        return Err(CodecError::ShortBuffer {
            needed,
            got: bytes.len(),
        });
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut v = 0u32;
        let mut bit = k * width as usize;
        let mut got = 0u32;
        let mut left = width as u32;
        while left > 0 {
            let byte = bit / 8;
            let offset = (bit % 8) as u32;
            let take = (8 - offset).min(left);
            let chunk = (bytes[byte] >> offset) as u32 & ((1u32 << take) - 1);
            v |= chunk << got;
            got += take;
            bit += take as usize;
            left -= take;
        }
        out.push(v);
    }
    Ok(out)
}
