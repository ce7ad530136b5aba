//! Block-wise NF4 codec with optional double quantization of the scales.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::codebook::codebook;

/// Default first-level block size (values per absmax scale).
pub const DEFAULT_BLOCK: usize = 64;
/// Default second-level group size (scales per 8-bit quantization group).
pub const DEFAULT_SCALE_GROUP: usize = 256;

/// Per-block scale storage: full-precision floats, or 8-bit codes with one
/// 32-bit step and one 32-bit offset per group of `group` scales.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleStore {
    Plain(Vec<f32>),
    Double {
        codes: Vec<u8>,
        group: usize,
        steps: Vec<f32>,
        offsets: Vec<f32>,
    },
}

/// Frozen 4-bit representation of a tensor: packed codebook indices plus
/// per-block absmax scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    block_size: usize,
    /// Two 4-bit codes per byte, low nibble first.
    codes: Vec<u8>,
    scales: ScaleStore,
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_size)
    }

    pub fn double_quantized(&self) -> bool {
        matches!(self.scales, ScaleStore::Double { .. })
    }

    pub fn scale_group(&self) -> usize {
        match &self.scales {
            ScaleStore::Plain(_) => 0,
            ScaleStore::Double { group, .. } => *group,
        }
    }

    pub(crate) fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub(crate) fn scales(&self) -> &ScaleStore {
        &self.scales
    }

    pub(crate) fn from_raw(
        shape: Vec<usize>,
        block_size: usize,
        codes: Vec<u8>,
        scales: ScaleStore,
    ) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::Contract("quantized tensor cannot be empty".into()));
        }
        if codes.len() != numel.div_ceil(2) {
            return Err(Error::Data(format!(
                "packed code length {} does not match {} elements",
                codes.len(),
                numel
            )));
        }
        let blocks = numel.div_ceil(block_size);
        let scale_count = match &scales {
            ScaleStore::Plain(s) => s.len(),
            ScaleStore::Double { codes, group, steps, offsets } => {
                let groups = codes.len().div_ceil(*group);
                if steps.len() != groups || offsets.len() != groups {
                    return Err(Error::Data("second-level scale payload is inconsistent".into()));
                }
                codes.len()
            }
        };
        if scale_count != blocks {
            return Err(Error::Data(format!(
                "{scale_count} scales for {blocks} blocks"
            )));
        }
        Ok(QuantizedTensor {
            shape,
            block_size,
            codes,
            scales,
        })
    }

    /// Build from unpacked 4-bit indices. Codes >= 16 are rejected; this is
    /// the validation point for payloads coming from outside the codec.
    pub fn from_unpacked_codes(
        shape: Vec<usize>,
        block_size: usize,
        codes: &[u8],
        scales: ScaleStore,
    ) -> Result<Self> {
        if let Some(&bad) = codes.iter().find(|&&c| c >= 16) {
            return Err(Error::Data(format!("corrupted 4-bit code {bad} >= 16")));
        }
        Self::from_raw(shape, block_size, pack_nibbles(codes), scales)
    }

    /// Decoded scale of block `i`.
    pub fn block_scale(&self, i: usize) -> f32 {
        match &self.scales {
            ScaleStore::Plain(s) => s[i],
            ScaleStore::Double {
                codes,
                group,
                steps,
                offsets,
            } => {
                let g = i / group;
                codes[i] as f32 * steps[g] + offsets[g]
            }
        }
    }

    /// Reconstruct the full-precision values.
    pub fn dequantize_values(&self) -> Vec<f32> {
        let cb = codebook().values();
        let numel = self.numel();
        let mut out = Vec::with_capacity(numel);
        let mut scale = 0.0f32;
        for i in 0..numel {
            if i % self.block_size == 0 {
                scale = self.block_scale(i / self.block_size);
            }
            let byte = self.codes[i / 2];
            let code = if i % 2 == 0 { byte & 0x0F } else { byte >> 4 };
            out.push(cb[code as usize] * scale);
        }
        out
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.dequantize_values()).unwrap()
    }

    /// Bytes occupied by the stored payload: packed codes plus the scale
    /// store (codes, steps and offsets for the double-quantized form).
    pub fn storage_bytes(&self) -> usize {
        let scale_bytes = match &self.scales {
            ScaleStore::Plain(s) => s.len() * 4,
            ScaleStore::Double {
                codes,
                steps,
                offsets,
                ..
            } => codes.len() + steps.len() * 4 + offsets.len() * 4,
        };
        self.codes.len() + scale_bytes
    }
}

/// Quantize a tensor to NF4 with block size `b1`. When `double_quant` is set
/// the per-block scales are affine 8-bit quantized in groups of `b2`.
pub fn quantize_nf4(t: &Tensor, b1: usize, double_quant: bool) -> Result<QuantizedTensor> {
    quantize_nf4_grouped(t, b1, double_quant, DEFAULT_SCALE_GROUP)
}

pub fn quantize_nf4_grouped(
    t: &Tensor,
    b1: usize,
    double_quant: bool,
    b2: usize,
) -> Result<QuantizedTensor> {
    if t.numel() == 0 {
        return Err(Error::Contract("cannot quantize an empty tensor".into()));
    }
    if b1 == 0 || b2 == 0 {
        return Err(Error::Config("block sizes must be positive".into()));
    }
    let cb = codebook();
    let values = t.data();
    let blocks = values.len().div_ceil(b1);
    let mut scales = Vec::with_capacity(blocks);
    let mut codes = Vec::with_capacity(values.len());
    for chunk in values.chunks(b1) {
        let absmax = chunk.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if !absmax.is_finite() {
            return Err(Error::Numeric("non-finite value in quantization input".into()));
        }
        // zero blocks round-trip exactly through the zero code at unit scale
        let scale = if absmax == 0.0 { 1.0 } else { absmax };
        scales.push(scale);
        if absmax == 0.0 {
            codes.extend(std::iter::repeat(cb.zero_index() as u8).take(chunk.len()));
        } else {
            codes.extend(chunk.iter().map(|&v| cb.nearest_index(v / scale)));
        }
    }
    let store = if double_quant {
        quantize_scales(&scales, b2)
    } else {
        ScaleStore::Plain(scales)
    };
    QuantizedTensor::from_raw(t.shape().to_vec(), b1, pack_nibbles(&codes), store)
}

/// Affine 8-bit quantization of the scale vector in groups of `b2`:
/// code = round((s - min) / step) with step = (max - min) / 255.
fn quantize_scales(scales: &[f32], b2: usize) -> ScaleStore {
    let groups = scales.len().div_ceil(b2);
    let mut codes = Vec::with_capacity(scales.len());
    let mut steps = Vec::with_capacity(groups);
    let mut offsets = Vec::with_capacity(groups);
    for chunk in scales.chunks(b2) {
        let min = chunk.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let step = (max - min) / 255.0;
        steps.push(step);
        offsets.push(min);
        if step == 0.0 {
            codes.extend(std::iter::repeat(0u8).take(chunk.len()));
        } else {
            codes.extend(
                chunk
                    .iter()
                    .map(|&s| ((s - min) / step).round().clamp(0.0, 255.0) as u8),
            );
        }
    }
    ScaleStore::Double {
        codes,
        group: b2,
        steps,
        offsets,
    }
}

/// Two 4-bit codes per byte, low nibble first; odd tails pad with zero.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(codes.len().div_ceil(2));
    for pair in codes.chunks(2) {
        let lo = pair[0] & 0x0F;
        let hi = if pair.len() > 1 { pair[1] & 0x0F } else { 0 };
        out.push((hi << 4) | lo);
    }
    out
}

pub fn unpack_nibbles(packed: &[u8], count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let byte = packed[i / 2];
        out.push(if i % 2 == 0 { byte & 0x0F } else { byte >> 4 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 0.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_block_roundtrips_exactly() {
        let t = Tensor::zeros(vec![64]);
        let q = quantize_nf4(&t, 64, false).unwrap();
        assert_eq!(q.block_scale(0), 1.0);
        assert!(q.dequantize_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn codebook_grid_points_are_fixed_points() {
        let cb = codebook().values();
        let absmax = 2.5f32;
        let data: Vec<f32> = cb.iter().map(|&c| c * absmax).collect();
        let t = Tensor::new(vec![16], data.clone()).unwrap();
        let q = quantize_nf4(&t, 16, false).unwrap();
        assert_eq!(q.dequantize_values(), data);
    }

    #[test]
    fn quantize_of_dequantized_is_idempotent() {
        let t = randn_tensor(vec![8, 32], 3);
        let q = quantize_nf4(&t, 64, false).unwrap();
        let back = q.dequantize();
        let q2 = quantize_nf4(&back, 64, false).unwrap();
        assert_eq!(q, q2);
    }

    #[test]
    fn dequantize_preserves_shape() {
        let t = randn_tensor(vec![5, 7], 11);
        let q = quantize_nf4(&t, 16, true).unwrap();
        assert_eq!(q.dequantize().shape(), &[5, 7]);
    }

    #[test]
    fn single_block_values_map_to_nearest_entries() {
        // absmax 1.0 so normalized values are the raw ones
        let t = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let q = quantize_nf4(&t, 2, false).unwrap();
        let cb = codebook();
        let got = q.dequantize_values();
        assert_eq!(got[0], cb.values()[cb.nearest_index(0.5) as usize]);
        assert_eq!(got[1], -1.0);
    }

    #[test]
    fn empty_tensor_rejected() {
        let t = Tensor::new(vec![0], vec![]).unwrap();
        assert!(matches!(
            quantize_nf4(&t, 64, false),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn corrupted_code_rejected() {
        let err = QuantizedTensor::from_unpacked_codes(
            vec![4],
            4,
            &[3, 16, 0, 1],
            ScaleStore::Plain(vec![1.0]),
        );
        assert!(matches!(err, Err(crate::error::Error::Data(_))));
    }

    #[test]
    fn roundtrip_error_bounded_by_half_max_gap() {
        let t = randn_tensor(vec![4096], 17);
        let q = quantize_nf4(&t, 64, false).unwrap();
        let back = q.dequantize_values();
        let half_gap = codebook().max_adjacent_gap() / 2.0;
        for (chunk, bchunk) in t.data().chunks(64).zip(back.chunks(64)) {
            let absmax = chunk.iter().fold(0.0f32, |a, v| a.max(v.abs()));
            for (w, hat) in chunk.iter().zip(bchunk) {
                assert!(
                    (w - hat).abs() <= absmax * half_gap + 1e-6,
                    "w={w} hat={hat} absmax={absmax}"
                );
            }
        }
    }

    #[test]
    fn double_quant_close_to_plain_scales() {
        let t = randn_tensor(vec![64 * 512], 23);
        let plain = quantize_nf4(&t, 64, false).unwrap().dequantize_values();
        let double = quantize_nf4(&t, 64, true).unwrap().dequantize_values();
        let num: f64 = plain
            .iter()
            .zip(&double)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        let den: f64 = plain.iter().map(|&a| (a as f64).powi(2)).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 0.02, "relative Frobenius gap {rel}");
    }

    #[test]
    fn nf4_beats_uniform_symmetric_on_gaussian_data() {
        let t = randn_tensor(vec![100_000], 31);
        let nf4 = quantize_nf4(&t, 64, false).unwrap().dequantize_values();
        let uni = super::super::uniform::uniform_symmetric_roundtrip(t.data(), 64, 4);
        let mse = |a: &[f32], b: &[f32]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / a.len() as f64
        };
        let m_nf4 = mse(t.data(), &nf4);
        let m_uni = mse(t.data(), &uni);
        assert!(m_nf4 < m_uni, "nf4 {m_nf4} vs uniform {m_uni}");
    }

    #[test]
    fn ragged_final_block_roundtrips() {
        let t = randn_tensor(vec![70], 41);
        let q = quantize_nf4(&t, 64, false).unwrap();
        assert_eq!(q.num_blocks(), 2);
        assert_eq!(q.dequantize_values().len(), 70);
    }

    proptest! {
        #[test]
        fn pack_unpack_lossless(codes in proptest::collection::vec(0u8..16, 1..64)) {
            let packed = pack_nibbles(&codes);
            prop_assert_eq!(unpack_nibbles(&packed, codes.len()), codes);
        }

        #[test]
        fn roundtrip_within_block_bound(vals in proptest::collection::vec(-10.0f32..10.0, 1..200)) {
            let t = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
            let q = quantize_nf4(&t, 16, false).unwrap();
            let back = q.dequantize_values();
            let half_gap = codebook().max_adjacent_gap() / 2.0;
            for (chunk, bchunk) in vals.chunks(16).zip(back.chunks(16)) {
                let absmax = chunk.iter().fold(0.0f32, |a, v| a.max(v.abs()));
                for (w, hat) in chunk.iter().zip(bchunk) {
                    prop_assert!((w - hat).abs() <= absmax * half_gap + 1e-5);
                }
            }
        }
    }
}
