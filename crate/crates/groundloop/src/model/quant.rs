//! Blockwise absmax quantization of frozen weights.
//!
//! Blocks run over the flattened row-major data. Each block stores a scale
//! `absmax / (2^(bits-1) - 1)` and biased integer codes around a fixed zero
//! point, so `dequant = scale * (code - zero_point)` and the reconstruction
//! error is at most half the block's quantization step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{cast, to_f64, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedWeights<S> {
    pub bits: u8,
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub zero_point: u16,
    pub codes: Vec<u16>,
    pub scales: Vec<S>,
}

impl<S: Scalar> QuantizedWeights<S> {
    pub fn dequantize(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let block = i / self.block_size;
            let code = self.codes[i] as i32 - self.zero_point as i32;
            *v = self.scales[block] * cast(code as f64);
        }
        out
    }

    /// Largest representable quantization step across blocks.
    pub fn max_step(&self) -> S {
        self.scales
            .iter()
            .cloned()
            .fold(S::zero(), S::max)
    }
}

/// Quantizes a matrix blockwise and returns both the codes and the
/// dequantized copy. `bits` must be 4 or 8; the final block may be short when
/// `block_size` does not divide the element count.
pub fn quantize_roundtrip<S: Scalar>(
    w: &Matrix<S>,
    bits: u8,
    block_size: usize,
) -> Result<(QuantizedWeights<S>, Matrix<S>)> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::EmptyInput("matrix to quantize"));
    }
    if !matches!(bits, 4 | 8) {
        return Err(Error::InvalidArgument(format!(
            "quantization bits must be 4 or 8, got {bits}"
        )));
    }
    if block_size == 0 {
        return Err(Error::InvalidArgument("block_size must be positive".into()));
    }

    let levels = (1i32 << (bits - 1)) - 1; // 7 or 127
    let zero_point = 1u16 << (bits - 1); // 8 or 128
    let data = w.data();
    let n_blocks = data.len().div_ceil(block_size);
    let mut codes = Vec::with_capacity(data.len());
    let mut scales = Vec::with_capacity(n_blocks);

    for block in data.chunks(block_size) {
        let absmax = block
            .iter()
            .map(|v| v.abs())
            .fold(S::zero(), S::max);
        let scale = if absmax == S::zero() {
            S::zero()
        } else {
            absmax / cast(levels as f64)
        };
        scales.push(scale);
        for &v in block {
            let code = if scale == S::zero() {
                0
            } else {
                to_f64(v / scale).round() as i32
            };
            let code = code.clamp(-levels, levels);
            codes.push((code + zero_point as i32) as u16);
        }
    }

    let qw = QuantizedWeights {
        bits,
        block_size,
        rows: w.rows(),
        cols: w.cols(),
        zero_point,
        codes,
        scales,
    };
    let dequant = qw.dequantize();
    Ok((qw, dequant))
}
