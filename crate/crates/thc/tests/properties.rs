//! Property suites for the invariants that hold over the whole input space.

use proptest::prelude::*;
use thc::codec::{
    decode_aggregate, decode_self, pack_bits, table_lookup_sum, thc_encode, unpack_bits,
};
use thc::hadamard::{clamp, fwht, rht, rht_inverse, TransformSeed};
use thc::protocol::{parse, GradientPacket, Packet};
use thc::tables::{LookupTable, TableKey};

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e6f64..1e6, len)
}

proptest! {
    #[test]
    fn pack_unpack_is_identity(width in 1u8..=16, values in prop::collection::vec(0u32..65536, 0..200)) {
        let values: Vec<u32> = values.into_iter().map(|v| v & ((1u32 << width) - 1)).collect();
        let packed = pack_bits(&values, width).unwrap();
        prop_assert_eq!(packed.len(), (values.len() * width as usize).div_ceil(8));
        prop_assert_eq!(unpack_bits(&packed, width, values.len()).unwrap(), values);
    }

    #[test]
    fn clamp_is_idempotent_and_bounded(x in finite_vec(1..100), lo in -10.0f64..0.0, width in 0.0f64..20.0) {
        let hi = lo + width;
        let once = clamp(&x, lo, hi).unwrap();
        prop_assert!(once.iter().all(|&v| v >= lo && v <= hi));
        prop_assert_eq!(clamp(&once, lo, hi).unwrap(), once);
    }

    #[test]
    fn fwht_is_an_involution(x in finite_vec(1..65), seed in any::<u64>()) {
        let mut padded = x.clone();
        padded.resize(x.len().next_power_of_two(), 0.0);
        let twice = fwht(&fwht(&padded).unwrap()).unwrap();
        let scale = padded.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
        for (a, b) in padded.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-9 * scale);
        }
        // and the randomized version with its diagonal
        let s = TransformSeed::new(seed, 0);
        let back = rht_inverse(&rht(&padded, s).unwrap(), s).unwrap();
        for (a, b) in padded.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn wire_roundtrips_any_gradient_packet(
        round in any::<u32>(),
        agtr in any::<u32>(),
        nw in 1u16..512,
        wid_frac in 0u16..512,
        count in 0u32..300,
        bits in 1u8..=16,
        fill in any::<u8>(),
    ) {
        let worker_id = wid_frac % nw;
        let len = (count as usize * bits as usize).div_ceil(8);
        let mut payload = vec![fill; len];
        if let Some(last) = payload.last_mut() {
            let used = (count as usize * bits as usize) % 8;
            if used != 0 {
                *last &= (1u8 << used) - 1;
            }
        }
        let pkt = GradientPacket {
            round_num: round,
            agtr_idx: agtr,
            num_worker: nw,
            worker_id,
            count,
            bits_per_index: bits,
            payload,
        };
        let bytes = pkt.serialize().unwrap();
        prop_assert_eq!(parse(&bytes).unwrap(), Packet::Gradient(pkt.clone()));
        // any strict prefix must fail to parse
        prop_assert!(parse(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn homomorphism_holds_for_random_tables(
        bits in 1u8..=3,
        extra_g in 0u32..12,
        n in 1usize..9,
        seed in any::<u64>(),
    ) {
        let g = (1u32 << bits) - 1 + extra_g;
        let mut rng = thc::seed::stream(seed);
        // random strictly increasing table with fixed endpoints
        let entries = 1usize << bits;
        let mut pool: Vec<u32> = (1..g).collect();
        let mut values = vec![0u32];
        for _ in 0..entries - 2 {
            let i = (rand::Rng::random::<u64>(&mut rng) % pool.len().max(1) as u64) as usize;
            values.push(pool.swap_remove(i));
        }
        values.push(g);
        values.sort_unstable();
        values.dedup();
        prop_assume!(values.len() == entries);
        let table = LookupTable {
            key: TableKey::new(bits, g, 1, 32).unwrap(),
            t_p: 2.0,
            values,
            variance: 0.0,
        };
        let d = 32;
        let x: Vec<f64> = (0..d).map(|_| rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0).collect();
        let encs: Vec<_> = (0..n)
            .map(|w| thc_encode(&x, -1.0, 1.0, &table, seed ^ w as u64, 0, w as u16).unwrap())
            .collect();
        let agg = table_lookup_sum(&encs, &table, 16).unwrap();
        // integer-domain identity
        let mut sums = vec![0u64; d];
        for e in &encs {
            for (s, z) in sums.iter_mut().zip(e.indices().unwrap()) {
                *s += table.values[z as usize] as u64;
            }
        }
        prop_assert_eq!(&sums, &agg.y_sum);
        // float identity at 1e-12 relative
        let decoded = decode_aggregate(&agg).unwrap();
        let mut avg = vec![0.0; d];
        for e in &encs {
            for (a, v) in avg.iter_mut().zip(decode_self(e, &table).unwrap()) {
                *a += v / n as f64;
            }
        }
        for (a, b) in avg.iter().zip(&decoded) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn sq_outputs_bracket_their_inputs(
        x_frac in prop::collection::vec(0.0f64..=1.0, 1..50),
        seed in any::<u64>(),
    ) {
        let table = LookupTable {
            key: TableKey::new(2, 5, 1, 32).unwrap(),
            t_p: 2.0,
            values: vec![0, 2, 3, 5],
            variance: 0.0,
        };
        let (m, max) = (-2.0, 2.0);
        let x: Vec<f64> = x_frac.iter().map(|f| m + f * (max - m)).collect();
        let enc = thc_encode(&x, m, max, &table, seed, 0, 0).unwrap();
        let back = decode_self(&enc, &table).unwrap();
        let q: Vec<f64> = table.values.iter().map(|&v| m + v as f64 * (max - m) / 5.0).collect();
        for (orig, got) in x.iter().zip(&back) {
            // got is one of the two table values bracketing orig
            let hi = q.partition_point(|v| v <= orig).min(q.len() - 1);
            let lo = hi - 1;
            prop_assert!((got - q[lo]).abs() < 1e-12 || (got - q[hi]).abs() < 1e-12 || (got - orig).abs() < 1e-12);
        }
    }
}
