use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(x: &Tensor, y: &Tensor, min_rows: usize) -> Result<usize> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::InvalidArgument("alignment inputs must be matrices".into()));
    }
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::InvalidArgument(format!("row counts differ: {n} vs {}", y.rows())));
    }
    if n < min_rows {
        return Err(Error::InvalidArgument(format!("need at least {min_rows} rows, got {n}")));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("alignment input".into()));
    }
    Ok(n)
}

/// Subtracts the column means.
pub fn center_columns(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| x.at(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            out.data_mut()[r * d + c] -= mean;
        }
    }
    out
}

/// Linear kernel of the column-centered data. Centering the data centers
/// the Gram matrix, so this equals `H·X·Xᵀ·H`.
fn centered_gram(x: &Tensor) -> Tensor {
    let xc = center_columns(x);
    xc.matmul(&xc.transpose()).expect("conformable")
}

fn frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Linear CKA with the biased HSIC estimator.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y, 2)?;
    let k = centered_gram(x);
    let l = centered_gram(y);
    let kk = frobenius(&k, &k);
    let ll = frobenius(&l, &l);
    if kk <= 0.0 || ll <= 0.0 {
        return Err(Error::InvalidArgument("constant embeddings have zero self-alignment".into()));
    }
    Ok(frobenius(&k, &l) / (kk * ll).sqrt())
}

/// Indices of the `k` largest off-diagonal entries of each row; ties go to
/// the lower index.
fn knn_mask(kernel: &Tensor, k: usize) -> Vec<bool> {
    let n = kernel.rows();
    let mut mask = vec![false; n * n];
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        idx.clear();
        idx.extend((0..n).filter(|&j| j != i));
        let row = kernel.row(i);
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &idx[..k] {
            mask[i * n + j] = true;
        }
    }
    mask
}

/// Unbiased HSIC estimator; requires `n ≥ 4`.
fn hsic_unbiased(k: &Tensor, l: &Tensor) -> f64 {
    let n = k.rows();
    let nf = n as f64;
    let mut kt = k.clone();
    let mut lt = l.clone();
    for i in 0..n {
        kt.data_mut()[i * n + i] = 0.0;
        lt.data_mut()[i * n + i] = 0.0;
    }
    let trace_kl = frobenius(&kt, &lt);
    let k_sum = kt.sum();
    let l_sum = lt.sum();
    // 1ᵀ K L 1 = Σ_j colsum(K)_j · rowsum(L)_j; both kernels are square
    let mut kl_sum = 0.0;
    for j in 0..n {
        let col_k: f64 = (0..n).map(|i| kt.at(i, j)).sum();
        let row_l: f64 = lt.row(j).iter().sum();
        kl_sum += col_k * row_l;
    }
    (trace_kl + k_sum * l_sum / ((nf - 1.0) * (nf - 2.0)) - 2.0 * kl_sum / (nf - 2.0)) / (nf * (nf - 3.0))
}

fn masked(kernel: &Tensor, mask: &[bool]) -> Tensor {
    let data = kernel.data().iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    Tensor::new(kernel.shape().to_vec(), data).expect("same shape")
}

/// Mutual k-nearest-neighbor kernel alignment.
///
/// Kernels are inner products of the column-centered data. Only pairs where
/// `j` is among the `k` nearest neighbors of `i` in both spaces contribute to
/// the cross term; each self term uses its own neighbor mask.
pub fn cknna(x: &Tensor, y: &Tensor, k: usize) -> Result<f64> {
    let n = check_pair(x, y, 4)?;
    if k == 0 || n <= k {
        return Err(Error::InvalidArgument(format!("k = {k} needs 1 ≤ k < n = {n}")));
    }
    let kx = centered_gram(x);
    let ky = centered_gram(y);
    let mx = knn_mask(&kx, k);
    let my = knn_mask(&ky, k);
    let mutual: Vec<bool> = mx.iter().zip(&my).map(|(a, b)| *a && *b).collect();
    if !mutual.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("no mutual nearest neighbors".into()));
    }
    let cross = hsic_unbiased(&masked(&kx, &mutual), &masked(&ky, &mutual));
    let self_x = hsic_unbiased(&masked(&kx, &mx), &masked(&kx, &mx));
    let self_y = hsic_unbiased(&masked(&ky, &my), &masked(&ky, &my));
    if self_x <= 0.0 || self_y <= 0.0 {
        return Err(Error::InvalidArgument("degenerate self-alignment".into()));
    }
    Ok(cross / (self_x * self_y).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    /// Orthogonal matrix from Gram-Schmidt on a random square matrix.
    fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        let a = gaussian(rng, d, d);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for c in 0..d {
            let mut v: Vec<f64> = (0..d).map(|r| a.at(r, c)).collect();
            for u in &cols {
                let p: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
        let mut out = Tensor::zeros(&[d, d]);
        for (c, v) in cols.iter().enumerate() {
            for r in 0..d {
                out.data_mut()[r * d + c] = v[r];
            }
        }
        out
    }

    #[test]
    fn self_alignment_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian(&mut rng, 40, 5);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        for k in [1, 5, 10, 39] {
            assert!((cknna(&x, &x, k).unwrap() - 1.0).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn orthogonal_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 50, 6);
        let y = gaussian(&mut rng, 50, 3).matmul(&gaussian(&mut rng, 3, 4)).unwrap();
        let r = orthogonal(&mut rng, 6);
        let xr = x.matmul(&r).unwrap();
        assert!((linear_cka(&xr, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!((cknna(&xr, &x, 10).unwrap() - 1.0).abs() < 1e-9);
        let shifted = y.map(|v| v + 3.5);
        assert!((linear_cka(&x, &shifted).unwrap() - linear_cka(&x, &y).unwrap()).abs() < 1e-9);
        assert!((cknna(&x, &shifted, 10).unwrap() - cknna(&x, &y, 10).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 30, 4);
        let y = x.map(|v| v.tanh()).matmul(&gaussian(&mut rng, 4, 2)).unwrap();
        let mut perm: Vec<usize> = (0..30).collect();
        for i in (1..30).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let (xp, yp) = (permute(&x), permute(&y));
        assert!((linear_cka(&xp, &yp).unwrap() - linear_cka(&x, &y).unwrap()).abs() < 1e-12);
        assert!((cknna(&xp, &yp, 5).unwrap() - cknna(&x, &y, 5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn independent_gaussians_align_weakly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(&mut rng, 500, 8);
        let y = gaussian(&mut rng, 500, 8);
        assert!(linear_cka(&x, &y).unwrap() < 0.1);
        assert!(cknna(&x, &y, 10).unwrap() < 0.2);
    }

    #[test]
    fn argument_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(&mut rng, 10, 3);
        assert!(cknna(&x, &x, 10).is_err());
        assert!(cknna(&x, &x, 0).is_err());
        assert!(linear_cka(&x, &gaussian(&mut rng, 9, 3)).is_err());
        assert!(linear_cka(&x, &Tensor::full(&[10, 2], 1.0)).is_err());
    }

    #[test]
    fn unbiased_hsic_matches_double_sum_form() {
        // Direct O(n⁴) definition from the U-statistic on a tiny case.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(&mut rng, 6, 2);
        let b = gaussian(&mut rng, 6, 2);
        let k = a.matmul(&a.transpose()).unwrap();
        let l = b.matmul(&b.transpose()).unwrap();
        let n = 6;
        let mut t1 = 0.0;
        let mut t2 = 0.0;
        let mut t3 = 0.0;
        let distinct = |v: &[usize]| (0..v.len()).all(|i| (i + 1..v.len()).all(|j| v[i] != v[j]));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                t1 += k.at(i, j) * l.at(i, j);
                for q in 0..n {
                    if distinct(&[i, j, q]) {
                        t3 += k.at(i, j) * l.at(i, q);
                    }
                    for r in 0..n {
                        if distinct(&[i, j, q, r]) {
                            t2 += k.at(i, j) * l.at(q, r);
                        }
                    }
                }
            }
        }
        let nf = n as f64;
        let p2 = nf * (nf - 1.0);
        let p3 = p2 * (nf - 2.0);
        let p4 = p3 * (nf - 3.0);
        let expected = t1 / p2 + t2 / p4 - 2.0 * t3 / p3;
        let got = hsic_unbiased(&k, &l);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }
}
