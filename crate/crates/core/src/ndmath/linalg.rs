use super::DenseMatrix;
use crate::error::{Error, Result};

/// Pivot magnitude below which a matrix is treated as rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// `a^k` by exponentiation by squaring; `a^0 = I`.
pub fn matrix_power(a: &DenseMatrix, k: u64) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "matrix_power needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut result: Option<DenseMatrix> = None;
    let mut base = a.clone();
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => r.matmul(&base)?,
            });
        }
        e >>= 1;
        if e > 0 {
            base = base.matmul(&base)?;
        }
    }
    Ok(result.unwrap_or_else(|| DenseMatrix::identity(a.rows())))
}

/// Q factor of the Householder QR decomposition of a square matrix,
/// normalized so that `R` has a nonnegative diagonal.
pub fn orthogonalize(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "orthogonalize needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for k in 0..n {
        let norm = (k..n).map(|i| r.get(i, k).powi(2)).sum::<f64>().sqrt();
        if norm < RANK_TOLERANCE {
            return Err(Error::Degenerate(format!(
                "column {k} has pivot {norm:e}, matrix is rank-deficient"
            )));
        }
        let x0 = r.get(k, k);
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= vnorm);
            apply_reflector(&mut r, k, &v);
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1}
    let mut q = DenseMatrix::identity(n);
    for (k, v) in reflectors.iter().enumerate().rev() {
        apply_reflector(&mut q, k, v);
    }
    for k in 0..n {
        if r.get(k, k) < 0.0 {
            for i in 0..n {
                q.set(i, k, -q.get(i, k));
            }
        }
    }
    Ok(q)
}

/// Applies `I - 2 v vᵀ` (acting on rows `k..`) from the left.
fn apply_reflector(m: &mut DenseMatrix, k: usize, v: &[f64]) {
    let n = m.rows();
    for j in 0..m.cols() {
        let dot: f64 = (k..n).map(|i| v[i - k] * m.get(i, j)).sum();
        if dot != 0.0 {
            for i in k..n {
                let x = m.get(i, j) - 2.0 * v[i - k] * dot;
                m.set(i, j, x);
            }
        }
    }
}

/// `-log softmax(logits)[label]`, via log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
