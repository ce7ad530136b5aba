//! Little-endian serialization of quantized tensors, used inside checkpoint
//! files. Layout: header {shape, b1, b2, double-quant flag}, packed codes,
//! then the scale payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::nf4::{QuantizedTensor, ScaleStore};

pub fn write_quantized(w: &mut impl Write, q: &QuantizedTensor) -> Result<()> {
    write_u32(w, q.shape().len() as u32)?;
    for &d in q.shape() {
        write_u64(w, d as u64)?;
    }
    write_u32(w, q.block_size() as u32)?;
    write_u32(w, q.scale_group() as u32)?;
    w.write_all(&[q.double_quantized() as u8])?;
    write_u64(w, q.packed_codes().len() as u64)?;
    w.write_all(q.packed_codes())?;
    match q.scales() {
        ScaleStore::Plain(s) => {
            write_u64(w, s.len() as u64)?;
            for &v in s {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        ScaleStore::Double {
            codes,
            steps,
            offsets,
            ..
        } => {
            write_u64(w, codes.len() as u64)?;
            w.write_all(codes)?;
            write_u64(w, steps.len() as u64)?;
            for &v in steps {
                w.write_all(&v.to_le_bytes())?;
            }
            for &v in offsets {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_quantized(r: &mut impl Read) -> Result<QuantizedTensor> {
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Data(format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let b1 = read_u32(r)? as usize;
    let b2 = read_u32(r)? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let code_len = read_u64(r)? as usize;
    let mut codes = vec![0u8; code_len];
    r.read_exact(&mut codes)?;
    let scales = if flag[0] == 0 {
        let n = read_u64(r)? as usize;
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            s.push(read_f32(r)?);
        }
        ScaleStore::Plain(s)
    } else {
        let n = read_u64(r)? as usize;
        let mut sc = vec![0u8; n];
        r.read_exact(&mut sc)?;
        let groups = read_u64(r)? as usize;
        let mut steps = Vec::with_capacity(groups);
        for _ in 0..groups {
            steps.push(read_f32(r)?);
        }
        let mut offsets = Vec::with_capacity(groups);
        for _ in 0..groups {
            offsets.push(read_f32(r)?);
        }
        ScaleStore::Double {
            codes: sc,
            group: b2,
            steps,
            offsets,
        }
    };
    QuantizedTensor::from_raw(shape, b1, codes, scales)
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_nf4;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_plain_and_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::randn(vec![12, 40], 0.0, 1.0, &mut rng);
        for dq in [false, true] {
            let q = quantize_nf4(&t, 64, dq).unwrap();
            let mut buf = Vec::new();
            write_quantized(&mut buf, &q).unwrap();
            let back = read_quantized(&mut buf.as_slice()).unwrap();
            assert_eq!(q, back);
            assert_eq!(q.dequantize_values(), back.dequantize_values());
        }
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = Tensor::randn(vec![64], 0.0, 1.0, &mut rng);
        let q = quantize_nf4(&t, 64, false).unwrap();
        let mut buf = Vec::new();
        write_quantized(&mut buf, &q).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_quantized(&mut buf.as_slice()).is_err());
    }
}
