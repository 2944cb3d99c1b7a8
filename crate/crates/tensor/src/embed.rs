use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sinusoidal embedding of a non-negative position:
/// `e[2i] = sin(t / 10000^(2i/C))`, `e[2i+1] = cos(t / 10000^(2i/C))`.
pub fn sinusoidal_embedding<T: Scalar>(t: u64, dim: usize) -> Result<Vec<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TensorError::Contract(format!(
            "sinusoidal embedding dimension must be even and positive, got {dim}"
        )));
    }
    let pos = t as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let (s, c) = (pos * freq).sin_cos();
        out.push(T::of(s));
        out.push(T::of(c));
    }
    Ok(out)
}

/// Rows `start..start+len` of the sinusoidal table, shape `[len, dim]`.
pub fn sinusoidal_table<T: Scalar>(start: u64, len: usize, dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len as u64 {
        data.extend(sinusoidal_embedding::<T>(start + t, dim)?);
    }
    Tensor::new(&[len, dim], data)
}

/// 2-D positional table for a `rows × cols` token grid in row-major order.
/// The first half of each embedding encodes the row, the second the column.
pub fn sinusoidal_grid<T: Scalar>(rows: usize, cols: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 4 != 0 {
        return Err(TensorError::Contract(format!(
            "2-D sinusoidal embedding needs a multiple of 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        let er = sinusoidal_embedding::<T>(r as u64, half)?;
        for c in 0..cols {
            data.extend_from_slice(&er);
            data.extend(sinusoidal_embedding::<T>(c as u64, half)?);
        }
    }
    Tensor::new(&[rows * cols, dim], data)
}
