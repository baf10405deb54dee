//! Small helpers for dense row-major arrays stored in flat `Vec`s.

use std::ops::{Add, Mul};

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Multi-index of flat position `flat` in a row-major array of `shape`.
pub fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for a in (0..shape.len()).rev() {
        out[a] = flat % shape[a];
        flat /= shape[a];
    }
}

/// Contract `matrix` (`rows × shape[axis]`, row-major) with `data` along
/// `axis`; the result has `shape[axis]` replaced by `rows`.
pub fn apply_along_axis<T, M>(data: &[T], shape: &[usize], axis: usize, matrix: &[M], rows: usize) -> Vec<T>
where
    T: Copy + Default + Add<Output = T> + Mul<M, Output = T>,
    M: Copy,
{
    let cols = shape[axis];
    debug_assert_eq!(matrix.len(), rows * cols);
    debug_assert_eq!(data.len(), shape.iter().product::<usize>());
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::default(); outer * rows * inner];
    for o in 0..outer {
        let src = &data[o * cols * inner..(o + 1) * cols * inner];
        let dst = &mut out[o * rows * inner..(o + 1) * rows * inner];
        for r in 0..rows {
            let row = &matrix[r * cols..(r + 1) * cols];
            let acc = &mut dst[r * inner..(r + 1) * inner];
            for (c, &m) in row.iter().enumerate() {
                let line = &src[c * inner..(c + 1) * inner];
                for (a, &v) in acc.iter_mut().zip(line) {
                    *a = *a + v * m;
                }
            }
        }
    }
    out
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose<M: Copy>(matrix: &[M], rows: usize, cols: usize) -> Vec<M> {
    let mut out = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            out.push(matrix[r * cols + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_and_unravel_agree() {
        let shape = [3, 4, 5];
        let s = strides(&shape);
        assert_eq!(s, vec![20, 5, 1]);
        let mut idx = [0; 3];
        unravel(37, &shape, &mut idx);
        assert_eq!(idx, [1, 3, 2]);
    }

    #[test]
    fn axis_contraction_matches_manual_product() {
        // data 2x3, contract axis 1 with a 2x3 matrix
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = [1.0, 0.0, -1.0, 0.5, 0.5, 0.5];
        let out = apply_along_axis(&data, &[2, 3], 1, &m, 2);
        assert_eq!(out, vec![-2.0, 3.0, -2.0, 7.5]);
        let out0 = apply_along_axis(&data, &[2, 3], 0, &[1.0, 1.0], 1);
        assert_eq!(out0, vec![5.0, 7.0, 9.0]);
    }
}
