//! Fixed sinusoidal positional embeddings, 1-D for token sequences and a
//! row/column factorized 2-D variant for grid patches.

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};
use crate::tensor::Tensor;

/// Classic transformer table: `pe[pos, 2i] = sin(pos·ω_i)`,
/// `pe[pos, 2i+1] = cos(pos·ω_i)` with `ω_i = 10000^(−2i/dim)`.
pub fn pos_embed_1d<T: Real>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "1-d positional embedding width must be even and positive, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let omega = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * omega;
            data.push(lit::<T>(angle.sin()));
            data.push(lit::<T>(angle.cos()));
        }
    }
    Tensor::from_vec(vec![len, dim], data)
}

/// 2-D grid embedding: the first `dim/2` channels encode the row index and
/// the last `dim/2` the column index, each with the 1-D formula. Cells are
/// emitted in row-major order, so patch `r·cols + c` corresponds to `(r, c)`.
pub fn pos_embed_2d<T: Real>(rows: usize, cols: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!(
            "2-d positional embedding width must be divisible by 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let row_pe = pos_embed_1d::<T>(rows, half)?;
    let col_pe = pos_embed_1d::<T>(cols, half)?;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            data.extend_from_slice(row_pe.row(r));
            data.extend_from_slice(col_pe.row(c));
        }
    }
    Tensor::from_vec(vec![rows * cols, dim], data)
}
