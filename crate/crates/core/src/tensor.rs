//! Dense row-major tensor of [`Scalar`] values.
//!
//! Shapes are lists of positive dimension sizes and `data.len()` always equals
//! the shape product. Constructors reject non-finite values so downstream math
//! can assume finite inputs throughout.

use crate::error::{TensorError, TensorResult};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> TensorResult<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: "all dimension sizes must be >= 1".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape product {} != data length {}", numel, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0-like scalar carrier, stored as shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the flat buffer. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        index.iter().zip(&strides).map(|(i, s)| i * s).sum()
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference, as f64. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    /// Serialize to the flat TSR1 text format:
    /// line 1 `TSR1`, line 2 the shape, line 3 the row-major values.
    pub fn to_tsr1(&self) -> String {
        let shape_line = self
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let value_line = self
            .data
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(" ");
        format!("TSR1\n{shape_line}\n{value_line}\n")
    }

    pub fn from_tsr1(text: &str) -> TensorResult<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.trim() != "TSR1" {
            return Err(TensorError::argument(
                "Tensor::from_tsr1",
                format!("expected TSR1 header, found {header:?}"),
            ));
        }
        let shape_line = lines
            .next()
            .ok_or_else(|| TensorError::argument("Tensor::from_tsr1", "missing shape line"))?;
        let value_line = lines
            .next()
            .ok_or_else(|| TensorError::argument("Tensor::from_tsr1", "missing value line"))?;
        let shape = shape_line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|e| {
                    TensorError::argument("Tensor::from_tsr1", format!("bad dimension {tok:?}: {e}"))
                })
            })
            .collect::<TensorResult<Vec<usize>>>()?;
        let data = value_line
            .split_whitespace()
            .map(|tok| {
                let v: f64 = tok.parse().map_err(|e| {
                    TensorError::argument("Tensor::from_tsr1", format!("bad value {tok:?}: {e}"))
                })?;
                T::from_f64(v)
                    .ok_or_else(|| TensorError::argument("Tensor::from_tsr1", "unrepresentable value"))
            })
            .collect::<TensorResult<Vec<T>>>()?;
        Tensor::new(shape, data)
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Decompose a flat row-major offset into a multi-index.
pub fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_zero_dims_and_length_mismatch() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn new_rejects_non_finite_values() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn indexing_follows_row_major_order() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.strides(), vec![3, 1]);
    }

    #[test]
    fn tsr1_round_trip_is_bit_identical() {
        let t = Tensor::new(
            vec![2, 2],
            vec![1.0, -0.1, 3.5e-12, std::f64::consts::PI],
        )
        .unwrap();
        let text = t.to_tsr1();
        let back = Tensor::<f64>::from_tsr1(&text).unwrap();
        assert_eq!(t, back);
        assert_eq!(text, back.to_tsr1());
    }

    #[test]
    fn tsr1_rejects_wrong_header() {
        assert!(Tensor::<f64>::from_tsr1("TSRX\n1\n1\n").is_err());
    }

    #[test]
    fn unravel_inverts_offset() {
        let shape = [2usize, 3, 4];
        let strides = row_major_strides(&shape);
        for flat in 0..24 {
            let idx = unravel(flat, &shape);
            let back: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            assert_eq!(back, flat);
        }
    }
}
