//! FP32 matrix helpers for the reference paths, the attention core and the
//! output head.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::qtensor::{fake_quantize, DenseTensor, QuantScheme};

/// `a[M x K] * b[K x P]`.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (m, k) = a.shape();
    let (k2, p) = b.shape();
    ensure!(k == k2, ShapeMismatch, "{m}x{k} times {k2}x{p}");
    let mut out = vec![0.0f32; m * p];
    if p > 0 {
        out.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
            for (kk, &av) in a.row(i).iter().enumerate() {
                if av != 0.0 {
                    for (o, &bv) in row.iter_mut().zip(b.row(kk)) {
                        *o += av * bv;
                    }
                }
            }
        });
    }
    Ok(DenseTensor::from_raw(m, p, out))
}

/// `a[M x K] * b[P x K]^T`.
pub fn matmul_nt(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    matmul(a, &b.transpose())
}

/// `a[K x M]^T * b[K x P]`.
pub fn matmul_tn(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    matmul(&a.transpose(), b)
}

pub fn add(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    ensure!(a.shape() == b.shape(), ShapeMismatch, "{:?} vs {:?}", a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(DenseTensor::from_raw(a.rows(), a.cols(), data))
}

pub fn map(a: &DenseTensor, f: impl Fn(usize, usize, f32) -> f32) -> DenseTensor {
    let cols = a.cols();
    let data = a.data().iter().enumerate().map(|(i, &v)| f(i / cols.max(1), i % cols.max(1), v)).collect();
    DenseTensor::from_raw(a.rows(), cols, data)
}

pub fn zip_map(a: &DenseTensor, b: &DenseTensor, f: impl Fn(f32, f32) -> f32) -> Result<DenseTensor> {
    ensure!(a.shape() == b.shape(), ShapeMismatch, "{:?} vs {:?}", a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(DenseTensor::from_raw(a.rows(), a.cols(), data))
}

/// Adds `bias` to every row.
pub fn add_row(a: &DenseTensor, bias: &[f32]) -> Result<DenseTensor> {
    ensure!(bias.len() == a.cols(), ShapeMismatch, "bias of length {} for {} columns", bias.len(), a.cols());
    Ok(map(a, |_, c, v| v + bias[c]))
}

/// Column sums, accumulated in row order.
pub fn column_sums(a: &DenseTensor) -> Vec<f32> {
    let mut out = vec![0.0f32; a.cols()];
    for r in 0..a.rows() {
        for (o, &v) in out.iter_mut().zip(a.row(r)) {
            *o += v;
        }
    }
    out
}

/// Applies `scheme` when present.
pub fn maybe_fake_quantize(x: DenseTensor, scheme: Option<QuantScheme>) -> Result<DenseTensor> {
    match scheme {
        Some(s) => fake_quantize(&x, s),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_transposes() {
        let a = DenseTensor::from_fn(3, 4, |r, c| (r * 4 + c) as f32 - 5.0).unwrap();
        let b = DenseTensor::from_fn(4, 2, |r, c| (r as f32) * 0.5 - c as f32).unwrap();
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.get(0, 0), -5.0 * 0.0 + -4.0 * 0.5 + -3.0 * 1.0 + -2.0 * 1.5);
        assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), ab);
        assert_eq!(matmul_tn(&a.transpose(), &b).unwrap(), ab);
        assert_eq!(column_sums(&a), vec![-3.0, 0.0, 3.0, 6.0]);
    }
}
