//! One-sided Jacobi SVD for the small matrices the analysis tools inspect.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{transpose, Tensor};

/// Largest row or column count accepted by [`svd_small`].
pub const MAX_SVD_DIM: usize = 16;
const MAX_SWEEPS: usize = 100;

/// `m = u · diag(sigma) · v`, with `u` (m×m) and `v` (n×n) orthogonal and
/// `diag(sigma)` the m×n rectangular diagonal. Note that `v` is stored in the
/// orientation that multiplies directly, i.e. it is the transpose of the
/// right-singular-vector matrix in the usual `U Σ Vᵀ` notation.
#[derive(Debug, Clone, Serialize)]
pub struct SvdResult {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    /// `u · diag(sigma) · v`.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let (m, n) = (self.u.shape()[0], self.v.shape()[0]);
        let mut scaled = vec![0.0; m * n];
        for i in 0..m {
            for (j, &s) in self.sigma.iter().enumerate() {
                scaled[i * n + j] = self.u.at2(i, j) * s;
            }
        }
        crate::tensor::matmul(&Tensor::new(vec![m, n], scaled)?, &self.v)
    }
}

/// Singular value decomposition of a 2-D tensor with both extents at most
/// [`MAX_SVD_DIM`]. Singular values come back sorted descending; there are
/// `min(rows, cols)` of them.
pub fn svd_small(m: &Tensor) -> Result<SvdResult> {
    if m.ndim() != 2 {
        return Err(Error::invalid(format!("svd_small expects a 2-D tensor, got {:?}", m.shape())));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if rows > MAX_SVD_DIM || cols > MAX_SVD_DIM {
        return Err(Error::invalid(format!(
            "svd_small is capped at {MAX_SVD_DIM}x{MAX_SVD_DIM}, got {rows}x{cols}"
        )));
    }
    if rows >= cols {
        tall_svd(m)
    } else {
        // Aᵀ = U Σ V  =>  A = Vᵀ Σᵀ Uᵀ
        let t = tall_svd(&transpose(m)?)?;
        Ok(SvdResult {
            u: transpose(&t.v)?,
            sigma: t.sigma,
            v: transpose(&t.u)?,
        })
    }
}

fn tall_svd(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    // Work at unit magnitude so squared norms neither underflow nor
    // overflow. A power of two keeps the rescaling exact.
    let peak = a.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let unit = if peak > 0.0 { 2f64.powi(peak.log2().floor() as i32) } else { 1.0 };
    // Column-major working copies: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at2(i, j) / unit).collect()).collect();
    let mut right: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Pairs count as orthogonal below a few ulps of relative correlation;
    // a threshold of exactly one ulp can be unreachable in floating point.
    let tol = m.max(2) as f64 * f64::EPSILON;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
                let beta: f64 = cols[q].iter().map(|v| v * v).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut right, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|v| v * v).sum::<f64>().sqrt(), j))
        .collect();
    // Stable sort keeps the result deterministic for tied values.
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let scale = order.first().map_or(0.0, |o| o.0);
    let tiny = scale * (m.max(n) as f64) * f64::EPSILON;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut sigma = Vec::with_capacity(n);
    let mut v_rows = Vec::with_capacity(n * n);
    for &(s, j) in &order {
        sigma.push(s * unit);
        v_rows.extend_from_slice(&right[j]);
        if s > tiny {
            basis.push(cols[j].iter().map(|v| v / s).collect());
        } else {
            basis.push(complete_direction(&basis, m));
        }
    }
    while basis.len() < m {
        let next = complete_direction(&basis, m);
        basis.push(next);
    }

    let mut u = vec![0.0; m * m];
    for (j, col) in basis.iter().enumerate() {
        for i in 0..m {
            u[i * m + j] = col[i];
        }
    }
    Ok(SvdResult {
        u: Tensor::new(vec![m, m], u)?,
        sigma,
        v: Tensor::new(vec![n, n], v_rows)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    for i in 0..cols[p].len() {
        let (x, y) = (cols[p][i], cols[q][i]);
        cols[p][i] = c * x - s * y;
        cols[q][i] = s * x + c * y;
    }
}

/// Unit vector orthogonal to every vector in `basis`, taken from the
/// canonical basis vector with the largest residual after two rounds of
/// Gram-Schmidt.
fn complete_direction(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for e in 0..m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = v;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    fn assert_orthogonal(q: &Tensor) {
        let qtq = matmul(&transpose(q).unwrap(), q).unwrap();
        let k = q.shape()[0];
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.at2(i, j) - want).abs() < 1e-9, "QᵀQ[{i},{j}] = {}", qtq.at2(i, j));
            }
        }
    }

    #[test]
    fn diagonal_matrix() {
        let r = svd_small(&Tensor::from_shape(&[2, 2], &[2.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(r.sigma, vec![2.0, 1.0]);
    }

    #[test]
    fn swapped_diagonal_is_sorted() {
        let r = svd_small(&Tensor::from_shape(&[2, 2], &[1.0, 0.0, 0.0, 3.0])).unwrap();
        assert_eq!(r.sigma, vec![3.0, 1.0]);
        let back = r.reconstruct().unwrap();
        assert!(back.max_abs_diff(&Tensor::from_shape(&[2, 2], &[1.0, 0.0, 0.0, 3.0])).unwrap() < 1e-12);
    }

    #[test]
    fn permutation_matrix() {
        let r = svd_small(&Tensor::from_shape(&[2, 2], &[0.0, 1.0, 1.0, 0.0])).unwrap();
        for s in &r.sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_and_wide() {
        let m = Tensor::from_shape(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
        let r = svd_small(&m).unwrap();
        assert_eq!(r.sigma.len(), 2);
        assert!(r.sigma[1].abs() < 1e-12);
        assert_orthogonal(&r.u);
        assert_orthogonal(&r.v);
        assert!(r.reconstruct().unwrap().max_abs_diff(&m).unwrap() < 1e-9);
    }

    #[test]
    fn zero_matrix() {
        let m = Tensor::zeros(&[3, 2]).unwrap();
        let r = svd_small(&m).unwrap();
        assert_eq!(r.sigma, vec![0.0, 0.0]);
        assert_orthogonal(&r.u);
        assert_orthogonal(&r.v);
    }

    #[test]
    fn rejects_non_matrix_and_oversize() {
        assert!(matches!(svd_small(&Tensor::from_slice(&[1.0, 2.0])), Err(Error::InvalidArgument(_))));
        let big = Tensor::zeros(&[17, 2]).unwrap();
        assert!(matches!(svd_small(&big), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn full_size_random_matrices_converge() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = MAX_SVD_DIM;
        for case in 0..2000 {
            let scale = 10f64.powi(rng.gen_range(-3..=1));
            // Odd cases are near rank one, the regime of trained layers
            // whose rows have collapsed onto a common direction.
            let noise = if case % 2 == 0 { 1.0 } else { 10f64.powi(rng.gen_range(-12..=-2)) };
            let (u, v): (Vec<f64>, Vec<f64>) = (0..n).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).unzip();
            let data: Vec<f64> = (0..n * n)
                .map(|k| {
                    let low_rank = if case % 2 == 0 { 0.0 } else { u[k / n] * v[k % n] };
                    scale * (low_rank + noise * rng.gen_range(-1.0..1.0))
                })
                .collect();
            let a = Tensor::new(vec![n, n], data).unwrap();
            let r = svd_small(&a).unwrap();
            assert!(r.reconstruct().unwrap().max_abs_diff(&a).unwrap() < 1e-12 * scale * n as f64);
        }
    }
}
