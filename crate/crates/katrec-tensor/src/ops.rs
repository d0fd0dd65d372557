//! Pure forward tensor operations. The graph in [`crate::Graph`] calls into
//! these; they are also usable directly for gradient-free computation.

use crate::{Tensor, TensorError};
use statrs::function::erf::erf;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// `a @ b` for `[m,k] x [k,n]`, or `a @ b^T` for `[m,k] x [n,k]` when `trans_b`.
pub fn matmul(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor, TensorError> {
    let (m, k) = a.shape();
    let (br, bc) = b.shape();
    let n = if trans_b { br } else { bc };
    let inner_ok = if trans_b { bc == k } else { br == k };
    if !inner_ok {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape_vec(),
            rhs: b.shape_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    if trans_b {
        // c[i,j] = dot(a.row(i), b.row(j))
        for i in 0..m {
            let ar = a.row(i);
            for j in 0..n {
                let br = b.row(j);
                let mut s = 0.0;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                out[i * n + j] = s;
            }
        }
    } else {
        for i in 0..m {
            let ar = a.row(i);
            let or = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ar[p];
                if aip == 0.0 {
                    continue;
                }
                let brow = b.row(p);
                for j in 0..n {
                    or[j] += aip * brow[j];
                }
            }
        }
    }
    Tensor::new(m, n, out)
}

/// `a^T @ b` for `[k,m] x [k,n]`. Used by backward passes only.
pub fn matmul_ta(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (k, m) = a.shape();
    let (br, n) = b.shape();
    if br != k {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_ta",
            lhs: a.shape_vec(),
            rhs: b.shape_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..m {
            let aip = arow[i];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(m, n, out)
}

fn zip_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    if a.same_shape(b) {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.rows(), a.cols(), data);
    }
    // Row broadcast: [m,n] op [1,n].
    if b.rows() == 1 && b.cols() == a.cols() {
        let mut data = Vec::with_capacity(a.numel());
        let brow = b.row(0);
        for r in 0..a.rows() {
            for (x, y) in a.row(r).iter().zip(brow.iter()) {
                data.push(f(*x, *y));
            }
        }
        return Tensor::new(a.rows(), a.cols(), data);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.shape_vec(),
        rhs: b.shape_vec(),
    })
}

/// Elementwise add; `b` may be a `[1,n]` row vector broadcast over rows of `a`.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    zip_elementwise("add", a, b, |x, y| x + y)
}

/// Elementwise subtract; same broadcast rule as [`add`].
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    zip_elementwise("sub", a, b, |x, y| x - y)
}

/// Elementwise product; shapes must match exactly.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if !a.same_shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            lhs: a.shape_vec(),
            rhs: b.shape_vec(),
        });
    }
    zip_elementwise("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// Concatenate along the last axis: `[m,p] || [m,q] -> [m,p+q]`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rows() != b.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "concat_cols",
            lhs: a.shape_vec(),
            rhs: b.shape_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::new(a.rows(), a.cols() + b.cols(), data)
}

/// Numerically stable softmax over the last axis of each row.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
    a.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() * INV_SQRT_2PI;
    0.5 * (1.0 + erf(x / SQRT_2)) + x * phi
}

/// Exact erf-based GELU.
pub fn gelu(a: &Tensor) -> Tensor {
    a.map(gelu_scalar)
}

pub fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x) without overflow.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus(a: &Tensor) -> Tensor {
    a.map(softplus_scalar)
}

pub fn log(a: &Tensor) -> Tensor {
    a.map(f64::ln)
}

pub fn clamp_min(a: &Tensor, min: f64) -> Tensor {
    a.map(|v| v.max(min))
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-12;

pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Layer normalization over the last axis with affine parameters
/// (`gamma`, `beta` are `[1,n]` row vectors).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, TensorError> {
    if gamma.rows() != 1 || gamma.cols() != x.cols() || !gamma.same_shape(beta) {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape_vec(),
            rhs: gamma.shape_vec(),
        });
    }
    let mut out = x.clone();
    let g = gamma.row(0).to_vec();
    let b = beta.row(0).to_vec();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let (mean, var) = row_moments(row);
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = g[i] * ((*v - mean) * inv) + b[i];
        }
    }
    Ok(out)
}

pub fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
}

/// Per-row sums: `[m,n] -> [m,1]`.
pub fn row_sums(a: &Tensor) -> Tensor {
    Tensor::from_fn(a.rows(), 1, |r, _| a.row(r).iter().sum())
}

/// Per-row means: `[m,n] -> [m,1]`.
pub fn row_means(a: &Tensor) -> Tensor {
    let n = a.cols() as f64;
    Tensor::from_fn(a.rows(), 1, |r, _| a.row(r).iter().sum::<f64>() / n)
}

/// Squared L2 norm of all entries, as a scalar tensor.
pub fn sq_l2(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().map(|&v| v * v).sum())
}

/// Gather rows of `table` by index: `[k, table.cols()]`.
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
    let mut data = Vec::with_capacity(indices.len() * table.cols());
    for &i in indices {
        if i >= table.rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: i,
                len: table.rows(),
            });
        }
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(indices.len(), table.cols(), data)
}

/// Reinterpret the row-major data with a new shape of equal element count.
pub fn reshape(a: &Tensor, rows: usize, cols: usize) -> Result<Tensor, TensorError> {
    if rows * cols != a.numel() {
        return Err(TensorError::BadShape {
            op: "reshape",
            expected: "shape with matching element count",
            shape: vec![rows, cols],
        });
    }
    Tensor::new(rows, cols, a.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let t = Tensor::row_vector(&[0.0, 0.0]).unwrap();
        let s = softmax_rows(&t);
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn leaky_relu_definition() {
        let s = 0.2;
        let t = Tensor::row_vector(&[0.0, -1.0, 2.0]).unwrap();
        let out = leaky_relu(&t, s);
        assert_eq!(out.data(), &[0.0, -s, 2.0]);
    }

    #[test]
    fn gelu_matches_scalar_loop() {
        // Independent evaluation of 0.5 x (1 + erf(x/sqrt(2))).
        let xs = [0.731, -1.442, 0.0517];
        let t = Tensor::row_vector(&xs).unwrap();
        let out = gelu(&t);
        for (i, &x) in xs.iter().enumerate() {
            let expected = 0.5 * x * (1.0 + erf(x / 2.0_f64.sqrt()));
            assert!((out.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shapes_checked() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(4, 2);
        let err = matmul(&a, &b, false).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn matmul_transposed_rhs() {
        let a = Tensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = matmul(&a, &b, true).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = Tensor::new(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 2.0, 2.0]).unwrap();
        let g = Tensor::filled(1, 4, 1.0);
        let b = Tensor::zeros(1, 4);
        let out = layer_norm(&x, &g, &b).unwrap();
        for r in 0..2 {
            let (mean, var) = row_moments(out.row(r));
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
