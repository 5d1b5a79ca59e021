//! Small dense linear algebra: one-sided Jacobi SVD, Moore–Penrose
//! pseudo-inverse and LU factorization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Singular values below `DEFAULT_RCOND · σ_max` are treated as zero.
pub const DEFAULT_RCOND: f64 = 1e-10;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `a = u · diag(s) · vᵀ` with singular values sorted descending.
///
/// For an `m × n` input with `r = min(m, n)`: `u` is `m × r`, `s` has `r`
/// entries and `v` is `n × r`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if !a.is_matrix() || a.rows() == 0 || a.cols() == 0 {
        return Err(Error::invalid("svd", format!("bad shape {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::invalid("svd", "non-finite input"));
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

/// Hestenes one-sided Jacobi on an `m × n` matrix with `m ≥ n`.
fn jacobi_tall(a: &Tensor) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    // Column-major working copy.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Orthogonality is only attainable up to rounding of the dot products.
    let tol = m as f64 * f64::EPSILON;
    // Columns this small are rounding noise; rotating them never settles.
    let negligible = (f64::EPSILON * a.frobenius_norm()).powi(2);
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            routine: "jacobi svd",
            iterations: MAX_SWEEPS,
        });
    }

    let mut order: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, c.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    let mut s = Vec::with_capacity(n);
    for (k, &(j, sigma)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            let val = if sigma > 0.0 { cols[j][i] / sigma } else { 0.0 };
            u.set(i, k, val);
        }
        for i in 0..n {
            vt.set(i, k, v[j][i]);
        }
    }
    Ok(Svd { u, s, v: vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Pseudo-inverse together with the singular values used to build it.
#[derive(Clone, Debug)]
pub struct PinvResult {
    pub pinv: Tensor,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

impl PinvResult {
    /// Smallest retained singular value relative to the largest one.
    pub fn retained_ratio(&self) -> f64 {
        match (self.singular_values.first(), self.rank) {
            (Some(&max), r) if r > 0 && max > 0.0 => self.singular_values[r - 1] / max,
            _ => 0.0,
        }
    }
}

pub fn pinv_detailed(a: &Tensor, rcond: f64) -> Result<PinvResult> {
    let Svd { u, s, v } = svd(a)?;
    let (m, n) = (a.rows(), a.cols());
    let cutoff = rcond * s.first().copied().unwrap_or(0.0);
    let rank = s.iter().filter(|&&x| x > cutoff && x > 0.0).count();
    // pinv = V · diag(1/s) · Uᵀ restricted to the retained rank.
    let mut out = vec![0.0; n * m];
    for k in 0..rank {
        let inv = 1.0 / s[k];
        for i in 0..n {
            let vik = v.get(i, k) * inv;
            if vik == 0.0 {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            for (j, r) in row.iter_mut().enumerate() {
                *r += vik * u.get(j, k);
            }
        }
    }
    Ok(PinvResult {
        pinv: Tensor::matrix(n, m, out),
        singular_values: s,
        rank,
    })
}

pub fn pinv(a: &Tensor) -> Result<Tensor> {
    pinv_detailed(a, DEFAULT_RCOND).map(|r| r.pinv)
}

/// LU factorization with partial pivoting of a square matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &Tensor) -> Result<Self> {
        if !a.is_matrix() || a.rows() != a.cols() {
            return Err(Error::invalid("lu", format!("not square: {:?}", a.shape())));
        }
        let n = a.rows();
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let pivot = (k..n)
                .max_by(|&i, &j| lu[i * n + k].abs().total_cmp(&lu[j * n + k].abs()))
                .unwrap_or(k);
            if pivot != k {
                for j in 0..n {
                    lu.swap(k * n + j, pivot * n + j);
                }
                perm.swap(k, pivot);
                sign = -sign;
            }
            let d = lu[k * n + k];
            if d == 0.0 {
                continue;
            }
            for i in k + 1..n {
                let f = lu[i * n + k] / d;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    pub fn det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>() * self.sign
    }

    pub fn is_singular(&self) -> bool {
        (0..self.n).any(|i| self.lu[i * self.n + i] == 0.0)
    }

    /// Solves `a · x = b` for an `n × k` right-hand side.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        if b.rows() != n {
            return Err(Error::shape("lu solve", &[n, n], b.shape()));
        }
        if self.is_singular() {
            return Err(Error::invalid("lu solve", "matrix is singular"));
        }
        let k = b.cols();
        let mut x = Tensor::zeros(&[n, k]);
        for c in 0..k {
            let mut y: Vec<f64> = self.perm.iter().map(|&p| b.get(p, c)).collect();
            for i in 0..n {
                for j in 0..i {
                    y[i] -= self.lu[i * n + j] * y[j];
                }
            }
            for i in (0..n).rev() {
                for j in i + 1..n {
                    y[i] -= self.lu[i * n + j] * y[j];
                }
                y[i] /= self.lu[i * n + i];
            }
            for (i, v) in y.into_iter().enumerate() {
                x.set(i, c, v);
            }
        }
        Ok(x)
    }
}

pub fn det(a: &Tensor) -> Result<f64> {
    Ok(Lu::new(a)?.det())
}

pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Lu::new(a)?.solve(b)
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    solve(a, &Tensor::eye(a.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn rel(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, n) in &[(5, 3), (3, 5), (4, 4), (1, 6), (6, 1)] {
            let a = random(m, n, &mut rng);
            let Svd { u, s, v } = svd(&a).unwrap();
            let back = u.matmul(&Tensor::diag(&s)).unwrap().matmul(&v.transpose()).unwrap();
            assert!(rel(&back, &a) < 1e-12, "{m}x{n}");
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn pinv_identity_and_rank_deficient() {
        assert!(pinv(&Tensor::eye(2)).unwrap().max_abs_diff(&Tensor::eye(2)) < 1e-15);
        let p = pinv(&Tensor::diag(&[2.0, 0.0])).unwrap();
        assert!(p.max_abs_diff(&Tensor::diag(&[0.5, 0.0])) < 1e-15);
    }

    #[test]
    fn repeated_columns_converge_to_rank_one() {
        let col = [1.12, 0.27, 0.87, -0.14, -0.22, -0.65, -0.12, 0.046, 0.3, -0.9];
        let a = Tensor::matrix(10, 19, col.iter().flat_map(|&x| [x; 19]).collect());
        let r = pinv_detailed(&a, DEFAULT_RCOND).unwrap();
        assert_eq!(r.rank, 1);
        let back = a.matmul(&r.pinv).unwrap().matmul(&a).unwrap();
        assert!(rel(&back, &a) < 1e-12);
    }

    #[test]
    fn pinv_matches_normal_equations_for_full_row_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random(2, 5, &mut rng);
            let mt = m.transpose();
            let oracle = mt.matmul(&inverse(&m.matmul(&mt).unwrap()).unwrap()).unwrap();
            assert!(rel(&pinv(&m).unwrap(), &oracle) < 1e-8);
        }
    }

    #[test]
    fn lu_solve_and_det() {
        let a = Tensor::matrix(3, 3, vec![2.0, 1.0, 1.0, 1.0, 3.0, 2.0, 1.0, 0.0, 0.0]);
        assert!((det(&a).unwrap() - (-1.0)).abs() < 1e-12);
        let b = Tensor::col_vector(vec![4.0, 5.0, 6.0]);
        let x = solve(&a, &b).unwrap();
        assert!(a.matmul(&x).unwrap().max_abs_diff(&b) < 1e-12);
        assert!(solve(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 1])).is_err());
    }
}
