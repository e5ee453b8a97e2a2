//! Dense helpers for the embedding-space fits: Cholesky solves and the polar
//! factor of a wide matrix.

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// `aᵀ·b` for row-major matrices with equal row counts.
pub(crate) fn gram(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, p, q) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[p, q]);
    crate::autodiff::gemm(p, n, q, a.data(), true, b.data(), false, out.data_mut(), false);
    out
}

/// Solves `A·X = B` for symmetric positive definite `A` (d×d) and `B` (d×m).
/// Returns `None` when a pivot falls below `rel_tol` times the largest
/// diagonal entry.
pub(crate) fn cholesky_solve(a: &Tensor, b: &Tensor, rel_tol: f64) -> Option<Tensor> {
    let d = a.rows();
    let m = b.cols();
    let max_diag = (0..d).map(|i| a.get(i, i)).fold(0.0f64, f64::max);
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut s = a.get(j, j);
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if !(s > rel_tol * max_diag) || s <= 0.0 {
            return None;
        }
        let ljj = s.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    let mut x = b.clone();
    let xs = x.data_mut();
    for c in 0..m {
        for i in 0..d {
            let mut s = xs[i * m + c];
            for k in 0..i {
                s -= l[i * d + k] * xs[k * m + c];
            }
            xs[i * m + c] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = xs[i * m + c];
            for k in i + 1..d {
                s -= l[k * d + i] * xs[k * m + c];
            }
            xs[i * m + c] = s / l[i * d + i];
        }
    }
    Some(x)
}

/// For `m` (p×q, p ≤ q) with thin SVD `U Σ Vᵀ`, returns `U·Vᵀ`: the p×q
/// matrix with orthonormal rows closest to `m`. Directions belonging to zero
/// singular values are completed with an arbitrary orthonormal choice.
pub(crate) fn polar_factor(m: &Tensor) -> Result<Tensor> {
    let (p, q) = (m.rows(), m.cols());
    if p > q {
        return Err(Error::shape(format!("polar factor needs rows ≤ cols, got {p}×{q}")));
    }
    // One-sided Jacobi on the columns of A = mᵀ (q×p): A·J = B with
    // orthogonal columns, so mᵀ = (B Σ⁻¹) Σ Jᵀ and U·Vᵀ = J (B Σ⁻¹)ᵀ.
    let a = m.transpose();
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| (0..q).map(|i| a.get(i, j)).collect()).collect();
    let mut jac: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..p).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();

    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for v in [&mut cols, &mut jac] {
                    let (lo, hi) = v.split_at_mut(j);
                    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                        let (xi, yj) = (*x, *y);
                        *x = c * xi - s * yj;
                        *y = s * xi + c * yj;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    // Left singular vectors, re-orthonormalised so that tiny singular values
    // cannot spoil orthogonality; null directions are filled from the
    // standard basis.
    let mut u: Vec<Option<Vec<f64>>> = vec![None; p];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(p);
    let orthonormalise = |v: &mut Vec<f64>, basis: &[Vec<f64>]| -> f64 {
        for _ in 0..2 {
            for b in basis {
                let proj = dot(v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let n = dot(v, v).sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        n
    };
    let mut deficient = Vec::new();
    for &j in &order {
        if norms[j] > 1e-12 * max_norm && max_norm > 0.0 {
            let mut v: Vec<f64> = cols[j].iter().map(|x| x / norms[j]).collect();
            if orthonormalise(&mut v, &basis) > 0.5 {
                basis.push(v.clone());
                u[j] = Some(v);
                continue;
            }
        }
        deficient.push(j);
    }
    let mut e = 0;
    for j in deficient {
        loop {
            let mut v = vec![0.0; q];
            v[e] = 1.0;
            e += 1;
            if orthonormalise(&mut v, &basis) > 0.5 {
                basis.push(v.clone());
                u[j] = Some(v);
                break;
            }
        }
    }

    // U·Vᵀ = J · Uᵀ_A where column k of U_A is u[k].
    let mut out = Tensor::zeros(&[p, q]);
    for r in 0..p {
        let row = out.row_mut(r);
        for (k, uk) in u.iter().enumerate() {
            let w = jac[k][r];
            let uk = uk.as_ref().expect("every column assigned");
            row.iter_mut().zip(uk).for_each(|(o, x)| *o += w * x);
        }
    }
    Ok(out)
}
