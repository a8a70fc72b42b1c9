use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.numel() == 0 || b.numel() == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::InvalidArgument(format!(
            "sequence feature dims differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `−γ log Σ exp(−x/γ)`, ignoring infinite entries.
fn soft_min(vals: [f64; 3], gamma: f64) -> f64 {
    let m = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = vals.iter().map(|&v| (-(v - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

/// Runs the alignment recursion `R[i][j] = cost(i, j) + min(R[i-1][j-1], R[i-1][j], R[i][j-1])`
/// with the given reduction over the three predecessors.
fn align(a: &Tensor, b: &Tensor, reduce: impl Fn([f64; 3]) -> f64) -> f64 {
    let (n, m) = (a.rows(), b.rows());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let c = sq_dist(a.row(i - 1), b.row(j - 1));
            cur[j] = c + reduce([prev[j - 1], prev[j], cur[j - 1]]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Soft-DTW between two `T × d` sequences with squared-Euclidean cell cost.
pub fn soft_dtw(a: &Tensor, b: &Tensor, gamma: f64) -> Result<f64> {
    check(a, b)?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(align(a, b, |v| soft_min(v, gamma)))
}

/// Classic DTW (the γ → 0 limit of [`soft_dtw`]).
pub fn dtw(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    Ok(align(a, b, |v| v.iter().cloned().fold(f64::INFINITY, f64::min)))
}
