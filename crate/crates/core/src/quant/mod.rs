//! Quantization codecs: uniform n-bit affine quantization and block-wise NF4
//! with double-quantized scales, plus bit-budget accounting and the wire
//! format used inside checkpoints.

mod budget;
mod codebook;
mod nf4;
mod uniform;
mod wire;

pub use budget::{bits_per_parameter, double_quant_savings, BitBudgetReport};
pub use codebook::{build_nf4_codebook, codebook, probit, Nf4Codebook, QUANTILE_OFFSET};
pub use nf4::{
    pack_nibbles, quantize_nf4, quantize_nf4_grouped, unpack_nibbles, QuantizedTensor, ScaleStore,
    DEFAULT_BLOCK, DEFAULT_SCALE_GROUP,
};
pub use uniform::{
    dequantize_uniform, quantize_uniform, uniform_symmetric_roundtrip, UniformQuantConfig,
};
pub use wire::{read_quantized, write_quantized};
