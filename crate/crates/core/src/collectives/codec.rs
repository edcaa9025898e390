//! Wire encodings for chunk payloads.
//!
//! FP32 is a plain little-endian copy. FP16 rounds each element to half
//! precision. INT8 is symmetric linear quantization with one FP32 scale per
//! chunk: the payload is the 4-byte scale followed by one signed byte per
//! element.

use half::f16;

use super::CollectiveError;
use crate::profile::Precision;

/// One quantized chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantChunk {
    pub payload: Vec<i8>,
    /// `max_abs / 127`; zero for an all-zero chunk.
    pub scale: f32,
    pub element_count: usize,
}

impl QuantChunk {
    /// Largest absolute value the chunk can represent (`127 * scale`).
    pub fn range(&self) -> f32 {
        127.0 * self.scale
    }
}

pub fn quantize_chunk(values: &[f32]) -> Result<QuantChunk, CollectiveError> {
    let mut max_abs = 0.0f32;
    for &v in values {
        if !v.is_finite() {
            return Err(CollectiveError::NonFinite);
        }
        max_abs = max_abs.max(v.abs());
    }
    let scale = max_abs / 127.0;
    let payload = if scale == 0.0 {
        vec![0; values.len()]
    } else {
        values
            .iter()
            .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
            .collect()
    };
    Ok(QuantChunk {
        payload,
        scale,
        element_count: values.len(),
    })
}

pub fn dequantize_chunk(chunk: &QuantChunk) -> Vec<f32> {
    chunk.payload.iter().map(|&q| q as f32 * chunk.scale).collect()
}

/// Bytes on the wire for `elems` elements, excluding the per-chunk INT8 scale.
pub fn payload_bytes(wire: Precision, elems: usize) -> usize {
    elems * wire.bytes()
}

pub fn encode(values: &[f32], wire: Precision) -> Result<Vec<u8>, CollectiveError> {
    match wire {
        Precision::Fp32 => Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect()),
        Precision::Fp16 => Ok(values
            .iter()
            .flat_map(|&v| f16::from_f32(v).to_le_bytes())
            .collect()),
        Precision::Int8 => {
            let q = quantize_chunk(values)?;
            let mut out = Vec::with_capacity(4 + q.payload.len());
            out.extend_from_slice(&q.scale.to_le_bytes());
            out.extend(q.payload.iter().map(|&b| b as u8));
            Ok(out)
        }
    }
}

pub fn decode(bytes: &[u8], wire: Precision, elems: usize) -> Result<Vec<f32>, CollectiveError> {
    let expected = encoded_len(wire, elems);
    if bytes.len() != expected {
        return Err(CollectiveError::PayloadSize {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(match wire {
        Precision::Fp32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Precision::Fp16 => bytes
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Precision::Int8 => {
            let scale = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
            let chunk = QuantChunk {
                payload: bytes[4..].iter().map(|&b| b as i8).collect(),
                scale,
                element_count: elems,
            };
            dequantize_chunk(&chunk)
        }
    })
}

/// Encoded length including the INT8 scale prefix.
pub fn encoded_len(wire: Precision, elems: usize) -> usize {
    match wire {
        Precision::Int8 => 4 + elems,
        _ => payload_bytes(wire, elems),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_are_exact() {
        let q = quantize_chunk(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(q.payload, vec![0, 0, 0]);
        assert_eq!(q.scale, 0.0);
        assert_eq!(dequantize_chunk(&q), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_worked_example() {
        let q = quantize_chunk(&[-1.0, 0.5, 1.0]).unwrap();
        assert_eq!(q.scale, 1.0 / 127.0);
        assert_eq!(q.payload, vec![-127, 64, 127]);
        let d = dequantize_chunk(&q);
        assert!((d[1] - 64.0 / 127.0).abs() < 1e-7);
        assert!((d[1] - 0.5).abs() <= q.scale / 2.0 * (1.0 + 1e-6));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(quantize_chunk(&[1.0, f32::NAN]), Err(CollectiveError::NonFinite)));
        assert!(matches!(
            encode(&[f32::INFINITY], Precision::Int8),
            Err(CollectiveError::NonFinite)
        ));
    }

    #[test]
    fn fp32_wire_is_lossless() {
        let v = [1.5f32, -0.1, 3.0e-20, 7.0e30];
        let bytes = encode(&v, Precision::Fp32).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode(&bytes, Precision::Fp32, 4).unwrap(), v);
    }

    #[test]
    fn decode_checks_length() {
        assert!(matches!(
            decode(&[0; 5], Precision::Fp32, 2),
            Err(CollectiveError::PayloadSize { expected: 8, actual: 5 })
        ));
    }

    #[test]
    fn uniform_vector_round_trip_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f32> = (0..1000).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let q = quantize_chunk(&v).unwrap();
        let d = dequantize_chunk(&q);
        let worst = v.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 127.0 + 1e-7, "worst {worst}");
    }

    proptest! {
        #[test]
        fn round_trip_error_within_half_scale(v in prop::collection::vec(-1.0e4f32..1.0e4, 1..200)) {
            let q = quantize_chunk(&v).unwrap();
            let d = dequantize_chunk(&q);
            for (a, b) in v.iter().zip(&d) {
                // Half a quantization step plus f32 rounding of the divide and multiply.
                prop_assert!((a - b).abs() <= q.scale / 2.0 + a.abs() * 4.0 * f32::EPSILON + f32::MIN_POSITIVE);
            }
            let bytes = encode(&v, Precision::Int8).unwrap();
            prop_assert_eq!(decode(&bytes, Precision::Int8, v.len()).unwrap(), d);
        }
    }
}
