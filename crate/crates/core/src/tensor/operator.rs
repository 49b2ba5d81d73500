use super::{Shape3, Tensor, TensorError};
use crate::network::ConvSpec;

/// Explicit matrix realization of a linear map, stored row-compressed.
///
/// Convolution systems touch only a receptive field per row, so rows keep
/// their nonzeros only. Column indices within a row are strictly ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl LinearOperator {
    pub(crate) fn builder(cols: usize) -> OperatorBuilder {
        OperatorBuilder {
            cols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut b = Self::builder(n);
        for i in 0..n {
            b.push(i, 1.0);
            b.finish_row();
        }
        b.build()
    }

    /// Builds from a dense row-major matrix, dropping exact zeros.
    pub fn from_dense(rows: usize, cols: usize, entries: &[f64]) -> Result<Self, TensorError> {
        if entries.len() != rows * cols {
            return Err(TensorError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        let mut b = Self::builder(cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = entries[r * cols + c];
                if v != 0.0 {
                    b.push(c, v);
                }
            }
            b.finish_row();
        }
        Ok(b.build())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `r` as `(column, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] = v;
            }
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        if x.len() != self.cols {
            return Err(TensorError::DimensionMismatch(format!(
                "operator has {} columns, vector has {} entries",
                self.cols,
                x.len()
            )));
        }
        Ok(self.apply_unchecked(x))
    }

    pub(crate) fn apply_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>, TensorError> {
        if y.len() != self.rows {
            return Err(TensorError::DimensionMismatch(format!(
                "operator has {} rows, vector has {} entries",
                self.rows,
                y.len()
            )));
        }
        Ok(self.apply_transpose_unchecked(y))
    }

    pub(crate) fn apply_transpose_unchecked(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                let slot = next[c];
                col_idx[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub(crate) fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    pub(crate) fn row_span(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    pub(crate) fn values(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) struct OperatorBuilder {
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl OperatorBuilder {
    /// Appends an entry to the current row. Columns must arrive ascending.
    pub(crate) fn push(&mut self, col: usize, value: f64) {
        debug_assert!(col < self.cols);
        debug_assert!(self.current_row_last().is_none_or(|last| last < col));
        self.col_idx.push(col);
        self.values.push(value);
    }

    fn current_row_last(&self) -> Option<usize> {
        let start = *self.row_ptr.last().unwrap();
        (self.col_idx.len() > start).then(|| *self.col_idx.last().unwrap())
    }

    pub(crate) fn finish_row(&mut self) {
        self.row_ptr.push(self.col_idx.len());
    }

    pub(crate) fn build(self) -> LinearOperator {
        LinearOperator {
            rows: self.row_ptr.len() - 1,
            cols: self.cols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            values: self.values,
        }
    }
}

/// Matrix of the zero-padded strided cross-correlation `Z = W * X` (bias excluded).
///
/// Columns follow the `(channel, row, col)` flattening of the input and rows
/// the `(filter, out_row, out_col)` flattening of the output.
pub fn build_conv_operator(
    input: Shape3,
    spec: &ConvSpec,
    kernels: &Tensor,
) -> Result<LinearOperator, TensorError> {
    let out = spec.output_shape(input)?;
    let k = spec.kernel;
    kernels.expect_shape(&spec.kernel_shape(input.channels), "conv kernels")?;
    let w = kernels.data();
    let mut b = LinearOperator::builder(input.len());
    for f in 0..spec.filters {
        for oy in 0..out.height {
            for ox in 0..out.width {
                for c in 0..input.channels {
                    for ky in 0..k {
                        let Some(iy) = tap(oy, ky, spec, input.height) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = tap(ox, kx, spec, input.width) else {
                                continue;
                            };
                            let v = w[((f * input.channels + c) * k + ky) * k + kx];
                            if v != 0.0 {
                                b.push(input.index(c, iy, ix), v);
                            }
                        }
                    }
                }
                b.finish_row();
            }
        }
    }
    Ok(b.build())
}

/// Matrix of the map `X -> dW` for a fixed output gradient `dZ`.
///
/// Row `(filter, channel, ky, kx)` holds, at every input pixel that kernel
/// tap reads, the output-gradient entry of the position reading it. Applying
/// the operator to `vec(X)` yields the flattened weight gradient.
pub fn build_weight_gradient_operator(
    out_grad: &Tensor,
    input: Shape3,
    spec: &ConvSpec,
) -> Result<LinearOperator, TensorError> {
    let out = spec.output_shape(input)?;
    out_grad.expect_shape(&[spec.filters, out.height, out.width], "output gradient")?;
    let g = out_grad.data();
    let k = spec.kernel;
    let mut b = LinearOperator::builder(input.len());
    for f in 0..spec.filters {
        let gf = &g[f * out.plane()..(f + 1) * out.plane()];
        for c in 0..input.channels {
            for ky in 0..k {
                for kx in 0..k {
                    for oy in 0..out.height {
                        let Some(iy) = tap(oy, ky, spec, input.height) else {
                            continue;
                        };
                        for ox in 0..out.width {
                            let gv = gf[oy * out.width + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            if let Some(ix) = tap(ox, kx, spec, input.width) {
                                b.push(input.index(c, iy, ix), gv);
                            }
                        }
                    }
                    b.finish_row();
                }
            }
        }
    }
    Ok(b.build())
}

/// Input coordinate read by output position `o` through kernel offset `k`, if
/// it falls inside the unpadded input.
#[inline]
fn tap(o: usize, k: usize, spec: &ConvSpec, extent: usize) -> Option<usize> {
    (o * spec.stride + k)
        .checked_sub(spec.padding)
        .filter(|&i| i < extent)
}

/// Concatenates systems that share an unknown vector.
pub fn stack_operators(
    ops: &[&LinearOperator],
    rhss: &[&[f64]],
) -> Result<(LinearOperator, Vec<f64>), TensorError> {
    if ops.len() != rhss.len() {
        return Err(TensorError::DimensionMismatch(format!(
            "{} operators but {} right-hand sides",
            ops.len(),
            rhss.len()
        )));
    }
    let Some(first) = ops.first() else {
        return Err(TensorError::EmptySystem);
    };
    let cols = first.cols();
    let mut b = LinearOperator::builder(cols);
    let mut rhs = Vec::new();
    for (i, (op, r)) in ops.iter().zip(rhss).enumerate() {
        if op.cols() != cols {
            return Err(TensorError::DimensionMismatch(format!(
                "operator {i} has {} columns, expected {cols}",
                op.cols()
            )));
        }
        if r.len() != op.rows() {
            return Err(TensorError::DimensionMismatch(format!(
                "right-hand side {i} has {} entries for {} rows",
                r.len(),
                op.rows()
            )));
        }
        for row in 0..op.rows() {
            for (c, v) in op.row(row) {
                b.push(c, v);
            }
            b.finish_row();
        }
        rhs.extend_from_slice(r);
    }
    Ok((b.build(), rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ActivationKind;

    fn spec(filters: usize, kernel: usize, stride: usize, padding: usize) -> ConvSpec {
        ConvSpec {
            filters,
            kernel,
            stride,
            padding,
            activation: ActivationKind::Relu,
        }
    }

    #[test]
    fn unit_kernel_on_single_pixel_is_identity() {
        let op = build_conv_operator(
            Shape3::new(1, 1, 1),
            &spec(1, 1, 1, 0),
            &Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(op, LinearOperator::identity(1));
    }

    #[test]
    fn two_by_two_kernel_on_three_by_three_input() {
        let kern = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let op = build_conv_operator(Shape3::new(3, 3, 1), &spec(1, 2, 1, 0), &kern).unwrap();
        assert_eq!((op.rows(), op.cols()), (4, 9));
        for r in 0..4 {
            let mut vals: Vec<f64> = op.row(r).map(|(_, v)| v).collect();
            vals.sort_by(f64::total_cmp);
            assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
        }
        // output (1,1) reads pixels (1,1),(1,2),(2,1),(2,2)
        assert_eq!(op.get(3, 4), 1.0);
        assert_eq!(op.get(3, 8), 4.0);
    }

    #[test]
    fn kernel_covering_input_gives_scaled_identity() {
        let g = Tensor::new(vec![1, 1, 1], vec![2.5]).unwrap();
        let op =
            build_weight_gradient_operator(&g, Shape3::new(3, 3, 2), &spec(1, 3, 1, 0)).unwrap();
        assert_eq!((op.rows(), op.cols()), (18, 18));
        for r in 0..18 {
            let row: Vec<_> = op.row(r).collect();
            assert_eq!(row, vec![(r, 2.5)]);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_operator() {
        let g = Tensor::zeros(&[2, 2, 2]);
        let op =
            build_weight_gradient_operator(&g, Shape3::new(3, 3, 1), &spec(2, 2, 1, 0)).unwrap();
        assert_eq!(op.rows(), 8);
        assert_eq!(op.nnz(), 0);
    }

    #[test]
    fn rejects_mismatched_kernels_and_empty_output() {
        let kern = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(build_conv_operator(Shape3::new(4, 4, 1), &spec(1, 3, 1, 0), &kern).is_err());
        let kern = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            build_conv_operator(Shape3::new(3, 3, 1), &spec(1, 5, 1, 0), &kern),
            Err(TensorError::EmptyOutput(_))
        ));
    }

    #[test]
    fn stacking() {
        let id = LinearOperator::identity(2);
        let (op, rhs) = stack_operators(&[&id], &[&[1.0, 2.0]]).unwrap();
        assert_eq!(op, id);
        assert_eq!(rhs, vec![1.0, 2.0]);
        let (op, rhs) = stack_operators(&[&id, &id], &[&[1.0, 2.0], &[1.0, 2.0]]).unwrap();
        assert_eq!((op.rows(), op.cols()), (4, 2));
        assert_eq!(rhs, vec![1.0, 2.0, 1.0, 2.0]);
        let wide = LinearOperator::identity(3);
        assert!(stack_operators(&[&id, &wide], &[&[1.0, 2.0], &[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn transpose_matches_dense() {
        let op = LinearOperator::from_dense(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 4.0]).unwrap();
        let t = op.transpose();
        assert_eq!(t.to_dense(), vec![1.0, 0.0, 0.0, 3.0, 2.0, 4.0]);
    }
}
