//! Forward helpers shared by several tape operations.

use super::{strides, Tensor};

/// For every input linear index, the linear index of the reduced output
/// (reduced axes collapsed to extent 1).
pub(crate) fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rem = idx;
        let mut out = 0;
        for (axis, &stride) in in_strides.iter().enumerate() {
            let coord = rem / stride;
            rem %= stride;
            if out_shape[axis] != 1 {
                out += coord * out_strides[axis];
            }
        }
        map.push(out);
    }
    (out_shape, map)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `[rows, width]` view of a tensor whose last axis is `width`.
pub(crate) fn rows_of(t: &Tensor) -> (usize, usize) {
    let width = *t.shape().last().unwrap_or(&1);
    (t.len() / width, width)
}
