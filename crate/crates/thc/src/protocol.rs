//! Bit-exact wire formats for the aggregation protocol.
//!
//! Every packet starts with a 20-byte common header (all integers
//! little-endian):
//!
//! ```text
//! offset  size  field
//!      0     2  magic        0x54 0x43
//!      2     1  version      1
//!      3     1  msg_type     1 gradient | 2 result | 3 prelim->PS |
//!                            4 prelim->workers | 5 straggler notice
//!      4     4  round_num
//!      8     4  agtr_idx     aggregation slot / chunk id
//!     12     2  num_worker
//!     14     2  worker_id
//!     16     4  count        values in the payload
//! ```
//!
//! followed by a per-type tail:
//!
//! * gradient: `bits_per_index: u8`, then `ceil(count*bits/8)` payload bytes
//!   of packed table indices;
//! * result: `value_width: u8`, `num_aggregated: u16`, then
//!   `ceil(count*width/8)` payload bytes of packed aggregated values;
//! * prelim: `mode: u8` (0 = min/max pair, 1 = norm), then two f64 (min/max)
//!   or one f64 (norm); `count` is 0;
//! * straggler notice: empty tail, `count` is 0.
//!
//! Parsing is strict: bad magic/version/type, short buffers, payload-length
//! mismatches, and trailing bytes are all rejected with the failing field
//! named in the error.

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x54, 0x43];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

pub const MSG_GRADIENT: u8 = 1;
pub const MSG_RESULT: u8 = 2;
pub const MSG_PRELIM_TO_SERVER: u8 = 3;
pub const MSG_PRELIM_TO_WORKERS: u8 = 4;
pub const MSG_STRAGGLER: u8 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("buffer too short for {field}: need {needed} bytes, got {got}")]
    ShortBuffer {
        field: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("bad magic {0:#04x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown msg_type {0}")]
    UnknownMsgType(u8),
    #[error("payload length mismatch: header implies {expected} bytes, buffer has {got}")]
    PayloadLengthMismatch { expected: usize, got: usize },
    #[error("{field} out of range: {value}")]
    FieldRange { field: &'static str, value: u64 },
    #[error("{got} trailing bytes after a {expected}-byte packet")]
    TrailingBytes { expected: usize, got: usize },
    #[error("unknown prelim mode {0}")]
    BadPrelimMode(u8),
}

/// Compressed gradient chunk: packed `bits_per_index`-bit table indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPacket {
    pub round_num: u32,
    pub agtr_idx: u32,
    pub num_worker: u16,
    pub worker_id: u16,
    pub count: u32,
    pub bits_per_index: u8,
    pub payload: Vec<u8>,
}

/// Aggregation result chunk: packed `value_width`-bit summed table values.
/// `num_aggregated` records how many workers the sum covers (partial
/// aggregation makes it smaller than `num_worker`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultPacket {
    pub round_num: u32,
    pub agtr_idx: u32,
    pub num_worker: u16,
    pub worker_id: u16,
    pub count: u32,
    pub value_width: u8,
    pub num_aggregated: u16,
    pub payload: Vec<u8>,
}

/// Preliminary-stage scale exchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrelimValue {
    /// Per-gradient extremes (uniform mode).
    MinMax { m: f64, max: f64 },
    /// Euclidean norm (norm-derived clamp range).
    Norm(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrelimPacket {
    /// msg_type 3 (worker to PS) when true, 4 (PS to workers) otherwise.
    pub to_server: bool,
    pub round_num: u32,
    pub num_worker: u16,
    pub worker_id: u16,
    pub value: PrelimValue,
}

/// PS-to-worker notice that a stale-round packet was discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct StragglerNotice {
    pub round_num: u32,
    pub agtr_idx: u32,
    pub num_worker: u16,
    pub worker_id: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Packet {
    Gradient(GradientPacket),
    Result(ResultPacket),
    Prelim(PrelimPacket),
    Straggler(StragglerNotice),
}

fn expected_payload(count: u32, width: u8) -> usize {
    (count as usize * width as usize).div_ceil(8)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(msg_type: u8, round: u32, agtr: u32, nw: u16, wid: u16, count: u32) -> Self {
        let mut w = Writer {
            buf: Vec::with_capacity(HEADER_LEN + 16),
        };
        w.buf.extend_from_slice(&MAGIC);
        w.buf.push(VERSION);
        w.buf.push(msg_type);
        w.buf.extend_from_slice(&round.to_le_bytes());
        w.buf.extend_from_slice(&agtr.to_le_bytes());
        w.buf.extend_from_slice(&nw.to_le_bytes());
        w.buf.extend_from_slice(&wid.to_le_bytes());
        w.buf.extend_from_slice(&count.to_le_bytes());
        w
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], WireError> {
        if self.buf.len() < self.pos + n {
            return Err(WireError::ShortBuffer {
                field,
                needed: self.pos + n,
                got: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, WireError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

impl GradientPacket {
    pub fn validate(&self) -> Result<(), WireError> {
        if self.worker_id >= self.num_worker {
            return Err(WireError::FieldRange {
                field: "worker_id",
                value: self.worker_id as u64,
            });
        }
        if self.bits_per_index == 0 || self.bits_per_index > 16 {
            return Err(WireError::FieldRange {
                field: "bits_per_index",
                value: self.bits_per_index as u64,
            });
        }
        let expected = expected_payload(self.count, self.bits_per_index);
        if self.payload.len() != expected {
            return Err(WireError::PayloadLengthMismatch {
                expected,
                got: self.payload.len(),
            });
        }
        Ok(())
    }

    pub fn serialize(&self) -> Result<Vec<u8>, WireError> {
        self.validate()?;
        let mut w = Writer::header(
            MSG_GRADIENT,
            self.round_num,
            self.agtr_idx,
            self.num_worker,
            self.worker_id,
            self.count,
        );
        w.buf.push(self.bits_per_index);
        w.buf.extend_from_slice(&self.payload);
        Ok(w.buf)
    }
}

impl ResultPacket {
    pub fn validate(&self) -> Result<(), WireError> {
        if self.value_width == 0 || self.value_width > 16 {
            return Err(WireError::FieldRange {
                field: "value_width",
                value: self.value_width as u64,
            });
        }
        let expected = expected_payload(self.count, self.value_width);
        if self.payload.len() != expected {
            return Err(WireError::PayloadLengthMismatch {
                expected,
                got: self.payload.len(),
            });
        }
        Ok(())
    }

    pub fn serialize(&self) -> Result<Vec<u8>, WireError> {
        self.validate()?;
        let mut w = Writer::header(
            MSG_RESULT,
            self.round_num,
            self.agtr_idx,
            self.num_worker,
            self.worker_id,
            self.count,
        );
        w.buf.push(self.value_width);
        w.buf.extend_from_slice(&self.num_aggregated.to_le_bytes());
        w.buf.extend_from_slice(&self.payload);
        Ok(w.buf)
    }
}

impl PrelimPacket {
    pub fn serialize(&self) -> Result<Vec<u8>, WireError> {
        let msg_type = if self.to_server {
            MSG_PRELIM_TO_SERVER
        } else {
            MSG_PRELIM_TO_WORKERS
        };
        let mut w = Writer::header(
            msg_type,
            self.round_num,
            0,
            self.num_worker,
            self.worker_id,
            0,
        );
        match self.value {
            PrelimValue::MinMax { m, max } => {
                w.buf.push(0);
                w.buf.extend_from_slice(&m.to_le_bytes());
                w.buf.extend_from_slice(&max.to_le_bytes());
            }
            PrelimValue::Norm(ell) => {
                w.buf.push(1);
                w.buf.extend_from_slice(&ell.to_le_bytes());
            }
        }
        Ok(w.buf)
    }
}

impl StragglerNotice {
    pub fn serialize(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::header(
            MSG_STRAGGLER,
            self.round_num,
            self.agtr_idx,
            self.num_worker,
            self.worker_id,
            0,
        )
        .buf)
    }
}

impl Packet {
    pub fn serialize(&self) -> Result<Vec<u8>, WireError> {
        match self {
            Packet::Gradient(p) => p.serialize(),
            Packet::Result(p) => p.serialize(),
            Packet::Prelim(p) => p.serialize(),
            Packet::Straggler(p) => p.serialize(),
        }
    }
}

/// Parse one packet, consuming the whole buffer.
pub fn parse(bytes: &[u8]) -> Result<Packet, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(2, "magic")?;
    if magic != MAGIC {
        return Err(WireError::BadMagic([magic[0], magic[1]]));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(WireError::BadVersion(version));
    }
    let msg_type = r.u8("msg_type")?;
    let round_num = r.u32("round_num")?;
    let agtr_idx = r.u32("agtr_idx")?;
    let num_worker = r.u16("num_worker")?;
    let worker_id = r.u16("worker_id")?;
    let count = r.u32("count")?;

    let packet = match msg_type {
        MSG_GRADIENT => {
            let bits_per_index = r.u8("bits_per_index")?;
            if bits_per_index == 0 || bits_per_index > 16 {
                return Err(WireError::FieldRange {
                    field: "bits_per_index",
                    value: bits_per_index as u64,
                });
            }
            let payload = r
                .take(expected_payload(count, bits_per_index), "payload")?
                .to_vec();
            let p = GradientPacket {
                round_num,
                agtr_idx,
                num_worker,
                worker_id,
                count,
                bits_per_index,
                payload,
            };
            p.validate()?;
            Packet::Gradient(p)
        }
        MSG_RESULT => {
            let value_width = r.u8("value_width")?;
            if value_width == 0 || value_width > 16 {
                return Err(WireError::FieldRange {
                    field: "value_width",
                    value: value_width as u64,
                });
            }
            let num_aggregated = r.u16("num_aggregated")?;
            let payload = r
                .take(expected_payload(count, value_width), "payload")?
                .to_vec();
            Packet::Result(ResultPacket {
                round_num,
                agtr_idx,
                num_worker,
                worker_id,
                count,
                value_width,
                num_aggregated,
                payload,
            })
        }
        MSG_PRELIM_TO_SERVER | MSG_PRELIM_TO_WORKERS => {
            let mode = r.u8("prelim_mode")?;
            let value = match mode {
                0 => PrelimValue::MinMax {
                    m: r.f64("prelim_m")?,
                    max: r.f64("prelim_M")?,
                },
                1 => PrelimValue::Norm(r.f64("prelim_norm")?),
                other => return Err(WireError::BadPrelimMode(other)),
            };
            Packet::Prelim(PrelimPacket {
                to_server: msg_type == MSG_PRELIM_TO_SERVER,
                round_num,
                num_worker,
                worker_id,
                value,
            })
        }
        MSG_STRAGGLER => Packet::Straggler(StragglerNotice {
            round_num,
            agtr_idx,
            num_worker,
            worker_id,
        }),
        other => return Err(WireError::UnknownMsgType(other)),
    };

    if r.pos != bytes.len() {
        return Err(WireError::TrailingBytes {
            expected: r.pos,
            got: bytes.len() - r.pos,
        });
    }
    Ok(packet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::pack_bits;

    fn minimal_gradient() -> GradientPacket {
        GradientPacket {
            round_num: 7,
            agtr_idx: 3,
            num_worker: 4,
            worker_id: 2,
            count: 2,
            bits_per_index: 4,
            payload: pack_bits(&[1, 2], 4).unwrap(),
        }
    }

    #[test]
    fn gradient_layout_matches_definition() {
        let p = minimal_gradient();
        let bytes = p.serialize().unwrap();
        // 20-byte common header + bits_per_index + one payload byte
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[..2], &MAGIC);
        assert_eq!(bytes[2], VERSION);
        assert_eq!(bytes[3], MSG_GRADIENT);
        assert_eq!(&bytes[4..8], &7u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &4u16.to_le_bytes());
        assert_eq!(&bytes[14..16], &2u16.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(bytes[20], 4);
        assert_eq!(bytes[21], 0x21);
        assert_eq!(parse(&bytes).unwrap(), Packet::Gradient(p));
    }

    #[test]
    fn four_bit_indices_halve_the_payload() {
        // d indices at b=4 cost d/2 bytes + constant header vs 4d for floats.
        let d = 1024u32;
        let p = GradientPacket {
            round_num: 0,
            agtr_idx: 0,
            num_worker: 1,
            worker_id: 0,
            count: d,
            bits_per_index: 4,
            payload: vec![0; (d as usize) / 2],
        };
        assert_eq!(p.serialize().unwrap().len(), d as usize / 2 + 21);
    }

    #[test]
    fn truncated_buffer_is_rejected() {
        let bytes = minimal_gradient().serialize().unwrap();
        for cut in 0..bytes.len() {
            assert!(parse(&bytes[..cut]).is_err(), "cut={cut}");
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = minimal_gradient().serialize().unwrap();
        bytes.push(0);
        assert_eq!(
            parse(&bytes).unwrap_err(),
            WireError::TrailingBytes {
                expected: 22,
                got: 1
            }
        );
    }

    #[test]
    fn bad_magic_version_type_diagnostics() {
        let good = minimal_gradient().serialize().unwrap();
        let mut bad = good.clone();
        bad[0] = 0x55;
        assert!(matches!(parse(&bad), Err(WireError::BadMagic(_))));
        let mut bad = good.clone();
        bad[2] = 9;
        assert_eq!(parse(&bad), Err(WireError::BadVersion(9)));
        let mut bad = good.clone();
        bad[3] = 77;
        assert_eq!(parse(&bad), Err(WireError::UnknownMsgType(77)));
    }

    #[test]
    fn gradient_validates_worker_id() {
        let mut p = minimal_gradient();
        p.worker_id = 4;
        assert_eq!(
            p.serialize().unwrap_err(),
            WireError::FieldRange {
                field: "worker_id",
                value: 4
            }
        );
    }

    #[test]
    fn all_packet_types_roundtrip() {
        let packets = vec![
            Packet::Gradient(minimal_gradient()),
            Packet::Result(ResultPacket {
                round_num: 1,
                agtr_idx: 2,
                num_worker: 10,
                worker_id: 0,
                count: 3,
                value_width: 8,
                num_aggregated: 9,
                payload: vec![10, 20, 30],
            }),
            Packet::Prelim(PrelimPacket {
                to_server: true,
                round_num: 5,
                num_worker: 4,
                worker_id: 1,
                value: PrelimValue::Norm(3.25),
            }),
            Packet::Prelim(PrelimPacket {
                to_server: false,
                round_num: 5,
                num_worker: 4,
                worker_id: 0,
                value: PrelimValue::MinMax { m: -1.5, max: 2.5 },
            }),
            Packet::Straggler(StragglerNotice {
                round_num: 9,
                agtr_idx: 1,
                num_worker: 4,
                worker_id: 3,
            }),
        ];
        for p in packets {
            let bytes = p.serialize().unwrap();
            assert_eq!(parse(&bytes).unwrap(), p);
        }
    }

    #[test]
    fn payload_length_must_match_header() {
        let mut p = minimal_gradient();
        p.payload.push(0);
        assert!(matches!(
            p.serialize(),
            Err(WireError::PayloadLengthMismatch { .. })
        ));
    }
}
