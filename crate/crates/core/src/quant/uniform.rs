//! Uniform n-bit affine quantization: w -> round(clamp((w - z)/s, lo, hi)).

use crate::error::{Error, Result};

/// Affine quantizer configuration for n-bit signed integers.
#[derive(Debug, Clone, Copy)]
pub struct UniformQuantConfig {
    /// Bit width in [2, 8].
    pub bits: u32,
    /// Scale factor, strictly positive.
    pub scale: f32,
    /// Zero point.
    pub zero_point: f32,
}

impl UniformQuantConfig {
    pub fn new(bits: u32, scale: f32, zero_point: f32) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::Config(format!("uniform bits {bits} outside [2,8]")));
        }
        if !(scale > 0.0) {
            return Err(Error::Config(format!("uniform scale {scale} must be > 0")));
        }
        Ok(UniformQuantConfig {
            bits,
            scale,
            zero_point,
        })
    }

    pub fn min_code(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn max_code(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

/// Quantize one value. Rounds half away from zero after clamping to the
/// representable integer range.
pub fn quantize_uniform(w: f32, cfg: &UniformQuantConfig) -> i32 {
    let t = (w - cfg.zero_point) / cfg.scale;
    let clamped = t.clamp(cfg.min_code() as f32, cfg.max_code() as f32);
    clamped.round() as i32
}

pub fn dequantize_uniform(code: i32, cfg: &UniformQuantConfig) -> f32 {
    code as f32 * cfg.scale + cfg.zero_point
}

/// Round-trip of a value stream through symmetric n-bit absmax quantization,
/// block by block. Codes span [-(2^{n-1}-1), 2^{n-1}-1] so zero is exact; this
/// is the standard comparison baseline for codebook quantizers.
pub fn uniform_symmetric_roundtrip(values: &[f32], block: usize, bits: u32) -> Vec<f32> {
    assert!(block > 0 && (2..=8).contains(&bits));
    let levels = ((1 << (bits - 1)) - 1) as f32;
    let mut out = Vec::with_capacity(values.len());
    for chunk in values.chunks(block) {
        let absmax = chunk.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if absmax == 0.0 {
            out.extend(std::iter::repeat(0.0).take(chunk.len()));
            continue;
        }
        for &v in chunk {
            let q = (v / absmax * levels).round().clamp(-levels, levels);
            out.push(q / levels * absmax);
        }
    }
    out
}
